//! Experiment configuration and the pipeline stages behind the CLI. Every
//! stage reads and writes files in one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::compare::{
    compare_models, ArmLtvPredictor, ErrorTable, LinearPredictor, DEFAULT_HORIZONS,
};
use super::metrics::{
    read_step_log, write_floating_log, write_metrics, write_step_log, MetricsRecord,
};
use super::plot::{error_curve_svg, histogram_svg, phi_svg, trajectory_svg};
use super::run::{run_floating_scenario, run_scenario, FloatingScenarioConfig, ModelShape};
use super::scenario::{load_index, save_index, Preset, ScenarioConfig};
use crate::error::{Error, Result};
use crate::kinematics::{sample_dataset, Dataset, Trajectory};
use crate::koopnet::{
    finetune_operators, prediction_errors, train, KoopmanModel, ModelSpec, TrainConfig,
};
use crate::mpc::ControllerKind;
use crate::safety::SafetyIndex;
use crate::tuner::{tune, write_audit, TunerConfig};

pub const DATASET_DIR: &str = "dataset";
pub const HOLDOUT_DIR: &str = "holdout";
pub const MODEL_FILE: &str = "model.json";
pub const FINETUNED_FILE: &str = "model_finetuned.json";
pub const INDEX_FILE: &str = "safety_index.json";
pub const AUDIT_FILE: &str = "tuning_audit.csv";
pub const HISTORY_FILE: &str = "train_history.csv";
pub const FINETUNE_ERRORS_FILE: &str = "finetune_errors.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_ERRORS_FILE: &str = "model_errors.csv";
pub const BENCH_FILE: &str = "bench.csv";

// Offsets that keep the derived random streams apart.
const HOLDOUT_SEED: u64 = 1000;
const FINETUNE_SEED: u64 = 2000;
const FINETUNE_HOLDOUT_SEED: u64 = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub holdout_trajectories: usize,
    pub holdout_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            steps: 50,
            holdout_trajectories: 40,
            holdout_steps: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Rollouts of the perturbed plant used for adaptation.
    pub trajectories: usize,
    pub steps: usize,
    pub holdout_trajectories: usize,
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            trajectories: 100,
            steps: 50,
            holdout_trajectories: 40,
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
        }
    }
}

/// Which model file the KMPC controller loads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[default]
    Trained,
    Finetuned,
}

/// Overrides applied to the selected scenario for `run` and `bench`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub steps: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    /// Controllers to run; empty means the scenario's own.
    pub controllers: Vec<ControllerKind>,
    pub slack_weight: Option<f64>,
    /// Use the tuned index from the output directory.
    pub tuned_index: bool,
    pub model: ModelChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub horizons: Vec<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            horizons: DEFAULT_HORIZONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub controllers: Vec<ControllerKind>,
    pub steps: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            controllers: vec![ControllerKind::Kmpc, ControllerKind::Nmpc],
            steps: None,
            seeds: None,
        }
    }
}

/// Top-level TOML configuration. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Replaces the preset's arm scenario.
    pub scenario: Option<ScenarioConfig>,
    /// Replaces the preset's floating-base scenario.
    pub floating: Option<FloatingScenarioConfig>,
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub tuner: TunerConfig,
    pub finetune: FinetuneConfig,
    pub run: RunConfig,
    pub compare: CompareConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::S2,
            scenario: None,
            floating: None,
            data: DataConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            tuner: TunerConfig::default(),
            finetune: FinetuneConfig::default(),
            run: RunConfig::default(),
            compare: CompareConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// The robot family an experiment runs on.
#[derive(Debug, Clone)]
pub enum Suite {
    Arm(Box<ScenarioConfig>),
    Floating(Box<FloatingScenarioConfig>),
}

/// Whether every episode ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Finished,
    Aborted,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: origin.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.tuner.validate()?;
        self.finetune.train.validate()?;
        if self.data.trajectories == 0 || self.data.steps == 0 {
            return Err(Error::param("data needs trajectories and steps"));
        }
        if self.compare.horizons.is_empty() || self.compare.horizons.contains(&0) {
            return Err(Error::param("comparison horizons must be positive"));
        }
        match self.suite()? {
            Suite::Arm(s) => s.validate(),
            Suite::Floating(f) => f.validate(),
        }
    }

    pub fn suite(&self) -> Result<Suite> {
        if let Some(f) = &self.floating {
            return Ok(Suite::Floating(Box::new(f.clone())));
        }
        if let Some(s) = &self.scenario {
            return Ok(Suite::Arm(Box::new(s.clone())));
        }
        Ok(match self.preset {
            Preset::S5 => Suite::Floating(Box::new(FloatingScenarioConfig::preset())),
            p => Suite::Arm(Box::new(p.scenario()?)),
        })
    }

    fn arm(&self, stage: &str) -> Result<ScenarioConfig> {
        match self.suite()? {
            Suite::Arm(s) => Ok(*s),
            Suite::Floating(_) => Err(Error::param(format!(
                "{stage} is not available for the floating-base suite"
            ))),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Scenario with the run overrides applied.
    fn run_scenario_config(
        &self,
        steps: Option<usize>,
        seeds: Option<&Vec<u64>>,
    ) -> Result<ScenarioConfig> {
        let mut s = self.arm("run")?;
        if let Some(k) = steps {
            s.steps = k;
        }
        if let Some(seeds) = seeds {
            s.seeds = seeds.clone();
        }
        if let Some(w) = self.run.slack_weight {
            s.mpc.slack_weight = Some(w);
        }
        Ok(s)
    }
}

/// Directory of the config file, used to resolve relative paths inside it.
pub fn config_base(config: Option<&Path>) -> PathBuf {
    config
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_or_sample(dir: &Path, sample: impl FnOnce() -> Result<Dataset>) -> Result<Vec<Trajectory>> {
    if dir.join("manifest.toml").exists() {
        Ok(Dataset::load(dir)?.trajectories)
    } else {
        Ok(sample()?.trajectories)
    }
}

fn arm_data(cfg: &ExperimentConfig, s: &ScenarioConfig) -> Result<(Dataset, Dataset)> {
    let plant = s.nominal_plant()?;
    let train = sample_dataset(&plant, cfg.data.trajectories, cfg.data.steps, cfg.seed)?;
    let hold = sample_dataset(
        &plant,
        cfg.data.holdout_trajectories.max(1),
        cfg.data.holdout_steps,
        cfg.seed.wrapping_add(HOLDOUT_SEED),
    )?;
    Ok((train, hold))
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let s = cfg.arm("gen-data")?;
    let (train, hold) = arm_data(cfg, &s)?;
    train.save(&out.join(DATASET_DIR))?;
    hold.save(&out.join(HOLDOUT_DIR))?;
    Ok(())
}

fn write_history(history: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss", "best_loss"])?;
    let mut best = f64::INFINITY;
    for (e, l) in history.iter().enumerate() {
        best = best.min(*l);
        w.write_record([e.to_string(), l.to_string(), best.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a fresh model on the saved dataset, sampling it first when
/// `gen-data` has not been run.
pub fn train_model(cfg: &ExperimentConfig, out: &Path) -> Result<KoopmanModel> {
    fs::create_dir_all(out)?;
    let tc = cfg.train_config();
    let (model, history) = match cfg.suite()? {
        Suite::Arm(s) => {
            let data = load_or_sample(&out.join(DATASET_DIR), || Ok(arm_data(cfg, &s)?.0))?;
            let chain = s.chain()?;
            let mut spec = ModelSpec::for_arm(&chain, s.dt, cfg.seed);
            spec.hidden = cfg.model.hidden.clone();
            spec.latent = cfg.model.latent;
            let fresh = KoopmanModel::new(&spec)?.with_chain(chain);
            let outcome = train(&fresh, &data, &tc)?;
            (outcome.model, outcome.history)
        }
        Suite::Floating(f) => {
            let data = f.dataset(cfg.data.trajectories, cfg.data.steps, cfg.seed)?;
            // The floating config carries its own network shape.
            let mut spec = crate::floatbase::floating_model_spec(&f.robot()?, f.dt, cfg.seed);
            spec.hidden = f.model.hidden.clone();
            spec.latent = f.model.latent;
            let outcome = train(&KoopmanModel::new(&spec)?, &data, &tc)?;
            (outcome.model, outcome.history)
        }
    };
    model.save(&out.join(MODEL_FILE))?;
    write_history(&history, &out.join(HISTORY_FILE))?;
    Ok(model)
}

fn load_model(out: &Path, choice: ModelChoice) -> Result<KoopmanModel> {
    let name = match choice {
        ModelChoice::Trained => MODEL_FILE,
        ModelChoice::Finetuned => FINETUNED_FILE,
    };
    let path = out.join(name);
    if !path.exists() {
        return Err(Error::param(format!(
            "{} not found; run the earlier stages first",
            path.display()
        )));
    }
    KoopmanModel::load(&path)
}

/// Tunes `(n, β)` against the scenario's first obstacle.
pub fn tune_safety(cfg: &ExperimentConfig, out: &Path) -> Result<SafetyIndex> {
    let s = cfg.arm("tune-safety")?;
    let model = load_model(out, ModelChoice::Trained)?;
    let obstacle = s
        .obstacles
        .first()
        .ok_or_else(|| Error::param("tuning needs at least one obstacle"))?;
    let tc = TunerConfig {
        seed: cfg.seed,
        ..cfg.tuner.clone()
    };
    let outcome = tune(
        &model,
        &s.chain()?,
        &DVector::from_column_slice(&obstacle.position),
        s.safety.d_min,
        &tc,
    )?;
    save_index(&outcome.index, &out.join(INDEX_FILE))?;
    write_audit(&outcome.audit, &out.join(AUDIT_FILE))?;
    Ok(outcome.index)
}

/// Mean one-step errors before and after adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSummary {
    pub before: f64,
    pub after: f64,
}

impl FinetuneSummary {
    pub fn reduction(&self) -> f64 {
        1.0 - self.after / self.before
    }
}

/// Adapts the operators to the perturbed plant and records the one-step
/// errors of both models on held-out perturbed rollouts.
pub fn finetune(cfg: &ExperimentConfig, out: &Path) -> Result<FinetuneSummary> {
    let s = cfg.arm("finetune")?;
    let model = load_model(out, ModelChoice::Trained)?;
    let plant = s.plant()?;
    let f = &cfg.finetune;
    let data = sample_dataset(
        &plant,
        f.trajectories,
        f.steps,
        cfg.seed.wrapping_add(FINETUNE_SEED),
    )?;
    let hold = sample_dataset(
        &plant,
        f.holdout_trajectories.max(1),
        f.steps,
        cfg.seed.wrapping_add(FINETUNE_HOLDOUT_SEED),
    )?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..f.train.clone()
    };
    let tuned = finetune_operators(&model, &data.trajectories, &tc)?.model;
    tuned.save(&out.join(FINETUNED_FILE))?;
    let before = prediction_errors(&model, &hold.trajectories, 1)?;
    let after = prediction_errors(&tuned, &hold.trajectories, 1)?;
    let mut w = csv::Writer::from_path(out.join(FINETUNE_ERRORS_FILE))?;
    w.write_record(["window", "before", "after"])?;
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        w.write_record([i.to_string(), b.to_string(), a.to_string()])?;
    }
    w.flush()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(FinetuneSummary {
        before: mean(&before),
        after: mean(&after),
    })
}

fn index_for(
    cfg: &ExperimentConfig,
    d_min: f64,
    resolved: SafetyIndex,
    out: &Path,
) -> Result<SafetyIndex> {
    if cfg.run.tuned_index {
        let tuned = load_index(&out.join(INDEX_FILE))?;
        SafetyIndex::new(tuned.n, tuned.beta, d_min)
    } else {
        Ok(resolved)
    }
}

fn step_log_name(kind: ControllerKind, seed: u64) -> String {
    format!("steps_{}_seed{seed}.csv", kind.as_str())
}

/// Runs the scenario under each configured controller, writing
/// `metrics.csv` and one step log per controller and seed.
pub fn run(
    cfg: &ExperimentConfig,
    out: &Path,
    base: &Path,
    record_timing: bool,
) -> Result<(Vec<MetricsRecord>, Completion)> {
    fs::create_dir_all(out)?;
    match cfg.suite()? {
        Suite::Floating(mut f) => {
            if let Some(k) = cfg.run.steps {
                f.steps = k;
            }
            if let Some(seeds) = &cfg.run.seeds {
                f.seeds = seeds.clone();
            }
            let index = index_for(cfg, f.safety.d_min, f.safety.resolve(base)?, out)?;
            let model = load_model(out, cfg.run.model)?;
            let result = run_floating_scenario(&f, &model, index, record_timing)?;
            let mut records = Vec::new();
            let mut aborted = false;
            for (seed, log) in &result.runs {
                write_floating_log(log, &out.join(step_log_name(ControllerKind::Kmpc, *seed)))?;
                records.push(MetricsRecord::from_log(&f.name, *seed, &log.log));
                aborted |= log.log.aborted.is_some();
            }
            records.push(result.aggregate);
            write_metrics(&records, &out.join(METRICS_FILE))?;
            Ok((records, completion(aborted)))
        }
        Suite::Arm(_) => {
            let mut s = cfg.run_scenario_config(cfg.run.steps, cfg.run.seeds.as_ref())?;
            let index = index_for(cfg, s.safety.d_min, s.safety.resolve(base)?, out)?;
            let kinds = if cfg.run.controllers.is_empty() {
                vec![s.controller]
            } else {
                cfg.run.controllers.clone()
            };
            let model = if kinds.contains(&ControllerKind::Kmpc) {
                Some(load_model(out, cfg.run.model)?)
            } else {
                None
            };
            let mut records = Vec::new();
            let mut aborted = false;
            for kind in kinds {
                s.controller = kind;
                let result = run_scenario(&s, model.as_ref(), index, record_timing)?;
                for (seed, log) in &result.runs {
                    write_step_log(log, &out.join(step_log_name(kind, *seed)))?;
                }
                aborted |= result.aborted();
                records.extend(result.per_seed);
                records.push(result.aggregate);
            }
            write_metrics(&records, &out.join(METRICS_FILE))?;
            Ok((records, completion(aborted)))
        }
    }
}

fn completion(aborted: bool) -> Completion {
    if aborted {
        Completion::Aborted
    } else {
        Completion::Finished
    }
}

/// Held-out error of the trained model against the analytic linear
/// models at each configured horizon.
pub fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<ErrorTable> {
    let s = cfg.arm("compare")?;
    let model = load_model(out, ModelChoice::Trained)?;
    let hold = load_or_sample(&out.join(HOLDOUT_DIR), || Ok(arm_data(cfg, &s)?.1))?;
    let chain = s.chain()?;
    let lti = LinearPredictor::arm_lti(&chain, &DVector::from_column_slice(&s.initial_q), s.dt)?;
    let ltv = ArmLtvPredictor { chain, dt: s.dt };
    let table = compare_models(
        &[("kdm", &model), ("lti", &lti), ("ltv", &ltv)],
        &hold,
        &cfg.compare.horizons,
    )?;
    table.write_csv(&out.join(MODEL_ERRORS_FILE))?;
    fs::write(
        out.join(MODEL_ERRORS_FILE.replace(".csv", ".svg")),
        error_curve_svg(&table)?,
    )?;
    Ok(table)
}

/// Timed runs of each bench controller. The returned records always carry
/// the measured times; `bench.csv` keeps them only with `record_timing`.
pub fn bench(
    cfg: &ExperimentConfig,
    out: &Path,
    base: &Path,
    record_timing: bool,
) -> Result<(Vec<MetricsRecord>, Completion)> {
    fs::create_dir_all(out)?;
    let mut s = cfg.run_scenario_config(cfg.bench.steps, cfg.bench.seeds.as_ref())?;
    let index = index_for(cfg, s.safety.d_min, s.safety.resolve(base)?, out)?;
    let model = if cfg.bench.controllers.contains(&ControllerKind::Kmpc) {
        Some(load_model(out, cfg.run.model)?)
    } else {
        None
    };
    let mut records = Vec::new();
    let mut aborted = false;
    for &kind in &cfg.bench.controllers {
        s.controller = kind;
        let result = run_scenario(&s, model.as_ref(), index, true)?;
        aborted |= result.aborted();
        records.push(result.aggregate);
    }
    let written: Vec<MetricsRecord> = records
        .iter()
        .cloned()
        .map(|mut r| {
            if !record_timing {
                r.solve_ms_mean = 0.0;
                r.solve_ms_std = 0.0;
            }
            r
        })
        .collect();
    write_metrics(&written, &out.join(BENCH_FILE))?;
    Ok((records, completion(aborted)))
}

/// Renders every step log in the output directory, the fine-tune error
/// histogram and the model-error curve when their CSVs exist. Returns the
/// files written.
pub fn plot(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (obstacles, d_min, dt) = match cfg.suite()? {
        Suite::Arm(s) => (
            s.obstacles
                .iter()
                .map(|o| DVector::from_column_slice(&o.position))
                .collect::<Vec<_>>(),
            s.safety.d_min,
            s.dt,
        ),
        Suite::Floating(f) => (
            f.obstacles
                .iter()
                .map(|o| DVector::from_column_slice(o))
                .collect(),
            f.safety.d_min,
            f.dt,
        ),
    };
    let mut logs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("steps_") && n.ends_with(".csv"))
        })
        .collect();
    logs.sort();
    let mut written = Vec::new();
    for path in &logs {
        let log = read_step_log(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .trim_start_matches("steps_")
            .to_string();
        for (name, svg) in [
            (
                format!("trajectory_{stem}.svg"),
                trajectory_svg(&log, &obstacles, d_min)?,
            ),
            (format!("phi_{stem}.svg"), phi_svg(&log, dt)?),
        ] {
            let p = out.join(name);
            fs::write(&p, svg)?;
            written.push(p);
        }
    }
    let ft = out.join(FINETUNE_ERRORS_FILE);
    if ft.exists() {
        let mut r = csv::Reader::from_path(&ft)?;
        let (mut before, mut after) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| {
                rec[i].parse::<f64>().map_err(|e| Error::Format {
                    path: ft.display().to_string(),
                    detail: e.to_string(),
                })
            };
            before.push(num(1)?);
            after.push(num(2)?);
        }
        let p = out.join("finetune_errors.svg");
        fs::write(
            &p,
            histogram_svg(
                "one-step prediction error",
                &[("before", &before), ("after", &after)],
                30,
            )?,
        )?;
        written.push(p);
    }
    let me = out.join(MODEL_ERRORS_FILE);
    if me.exists() {
        let p = out.join(MODEL_ERRORS_FILE.replace(".csv", ".svg"));
        fs::write(&p, error_curve_svg(&ErrorTable::read_csv(&me)?)?)?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(Error::param(format!(
            "nothing to plot in {}",
            out.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        let cfg = ExperimentConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("sed = 1", Path::new("x.toml")).is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3", Path::new("x.toml")).is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let text = "seed = 4\npreset = \"s4\"\n[train]\nepochs = 3\n[run]\ncontrollers = [\"ltv\", \"nmpc\"]\nsteps = 10\n";
        let cfg = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(
            cfg.run.controllers,
            vec![ControllerKind::Ltv, ControllerKind::Nmpc]
        );
        assert!(matches!(cfg.suite().unwrap(), Suite::Arm(s) if s.name == "s4"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(ExperimentConfig::from_toml("[train]\ngamma = 2.0", Path::new("x.toml")).is_err());
        assert!(
            ExperimentConfig::from_toml("[compare]\nhorizons = [0]", Path::new("x.toml")).is_err()
        );
    }

    #[test]
    fn floating_stages_are_limited() {
        let cfg = ExperimentConfig {
            preset: Preset::S5,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.suite().unwrap(), Suite::Floating(_)));
        let dir = tempfile::tempdir().unwrap();
        assert!(tune_safety(&cfg, dir.path()).is_err());
        assert!(gen_data(&cfg, dir.path()).is_err());
    }

    #[test]
    fn ltv_run_writes_logs_and_plots() {
        let text = "[run]\ncontrollers = [\"ltv\"]\nsteps = 15\nseeds = [1, 0]\n";
        let cfg = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (records, done) = run(&cfg, dir.path(), Path::new("."), false).unwrap();
        assert_eq!(done, Completion::Finished);
        assert_eq!(records.len(), 3);
        assert!(dir.path().join("steps_ltv_seed0.csv").exists());
        let plots = plot(&cfg, dir.path()).unwrap();
        assert_eq!(plots.len(), 4);
    }

    #[test]
    fn kmpc_without_a_model_is_an_error() {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        assert!(run(&cfg, dir.path(), Path::new("."), false).is_err());
        assert!(plot(&cfg, dir.path()).is_err());
    }
}
