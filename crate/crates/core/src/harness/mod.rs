//! Scenario definitions, closed-loop experiments, metrics, model
//! comparison, persistence and plotting.

mod compare;
mod experiment;
mod metrics;
mod plot;
mod run;
mod scenario;

pub use compare::{
    compare_models, mean_error, ArmLtvPredictor, ErrorTable, LinearPredictor, Predictor,
    DEFAULT_HORIZONS,
};
pub use experiment::{
    bench, compare, config_base, finetune, gen_data, plot, run, train_model, tune_safety,
    BenchConfig, CompareConfig, Completion, DataConfig, ExperimentConfig, FinetuneConfig,
    FinetuneSummary, ModelChoice, RunConfig, Suite, AUDIT_FILE, BENCH_FILE, DATASET_DIR,
    FINETUNED_FILE, FINETUNE_ERRORS_FILE, HISTORY_FILE, HOLDOUT_DIR, INDEX_FILE, METRICS_FILE,
    MODEL_ERRORS_FILE, MODEL_FILE,
};
pub use metrics::{
    mean_std, read_metrics, read_step_log, strip_timing, write_floating_log, write_metrics,
    write_step_log, MetricsRecord, TIMING_WARMUP,
};
pub use plot::{
    error_curve_svg, histogram_counts, histogram_svg, phi_svg, shared_range, trajectory_svg,
};
pub use run::{
    run_floating_scenario, run_scenario, FloatingRun, FloatingScenarioConfig, ModelShape,
    ScenarioRun,
};
pub use scenario::{
    chaser, fixed, load_index, save_index, transfer_references, ChainConfig, GammaSource, Jitter,
    ObstacleConfig, Perturbation, Preset, ReferenceShape, SafetyConfig, ScenarioConfig,
    ShootingConfig, TrackingWeights,
};
