use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{strip_timing, MetricsRecord};
use super::scenario::{ChainConfig, Jitter, SafetyConfig, ScenarioConfig};
use crate::error::{Error, Result};
use crate::floatbase::{
    floating_model_spec, run_floating, sample_floating_dataset, FloatingEpisode, FloatingLog,
    FloatingPlant, FloatingRobot, FloatingState,
};
use crate::kinematics::{JointLayout, Trajectory};
use crate::koopnet::{train, KoopmanModel, TrainConfig};
use crate::mpc::{run_controller, EpisodeLog, MpcConfig};
use crate::safety::{Obstacle, SafetyBoundConfig, SafetyIndex};

/// Logs and metrics of one scenario over all its seeds, in seed order.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub runs: Vec<(u64, EpisodeLog)>,
    pub per_seed: Vec<MetricsRecord>,
    pub aggregate: MetricsRecord,
}

impl ScenarioRun {
    pub fn aborted(&self) -> bool {
        self.runs.iter().any(|(_, l)| l.aborted.is_some())
    }
}

/// Runs every seed of `cfg`. Seeds run on parallel workers unless timing
/// is recorded, in which case they run one after another so the clock is
/// not shared.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    model: Option<&KoopmanModel>,
    index: SafetyIndex,
    record_timing: bool,
) -> Result<ScenarioRun> {
    cfg.validate()?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let one = |seed: u64| -> Result<(u64, EpisodeLog)> {
        let spec = cfg.controller_spec(model)?;
        let episode = cfg.episode(seed, index)?;
        let mut log = run_controller(&spec, &episode)?;
        if !record_timing {
            strip_timing(&mut log);
        }
        Ok((seed, log))
    };
    let runs: Vec<(u64, EpisodeLog)> = if record_timing || seeds.len() == 1 {
        seeds.iter().map(|&s| one(s)).collect::<Result<_>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || one(s))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::param("scenario worker panicked")))
                })
                .collect::<Result<Vec<_>>>()
        })?
    };
    let per_seed = runs
        .iter()
        .map(|(s, l)| MetricsRecord::from_log(&cfg.name, *s, l))
        .collect();
    let refs: Vec<(u64, &EpisodeLog)> = runs.iter().map(|(s, l)| (*s, l)).collect();
    let aggregate = MetricsRecord::aggregate(&cfg.name, cfg.controller, &refs);
    Ok(ScenarioRun {
        runs,
        per_seed,
        aggregate,
    })
}

/// Lifting-network shape for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            latent: 16,
        }
    }
}

/// Mobile-base scenario: the base follows a straight path past obstacles
/// while the arm holds a posture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloatingScenarioConfig {
    pub name: String,
    pub arm: ChainConfig,
    pub base_radius: f64,
    pub twist_limits: [f64; 3],
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_lag")]
    pub lag: f64,
    pub q_nominal: Vec<f64>,
    pub path_start: [f64; 2],
    pub path_end: [f64; 2],
    /// Steps to traverse the path.
    pub duration: usize,
    pub steps: usize,
    pub obstacles: Vec<[f64; 2]>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub jitter: Jitter,
    #[serde(default)]
    pub safety: SafetyConfig,
    #[serde(default)]
    pub bound: SafetyBoundConfig,
    /// Weights on `[q; θ; twist]` and the inputs; empty means defaults.
    #[serde(default)]
    pub mpc: MpcConfig,
    pub base_decision: bool,
    pub follow_gain: f64,
    #[serde(default = "floating_shape")]
    pub model: ModelShape,
}

fn default_dt() -> f64 {
    0.05
}

fn default_lag() -> f64 {
    0.7
}

fn floating_shape() -> ModelShape {
    ModelShape {
        hidden: vec![32, 32],
        latent: 8,
    }
}

impl FloatingScenarioConfig {
    pub fn preset() -> Self {
        Self {
            name: "s5".into(),
            arm: ChainConfig {
                layout: JointLayout::PlanarZ,
                link_lengths: vec![0.3, 0.25],
                collision_radii: vec![0.05, 0.05],
                velocity_limit: 1.0,
            },
            base_radius: 0.15,
            twist_limits: [0.5, 0.5, 1.0],
            dt: default_dt(),
            lag: default_lag(),
            q_nominal: vec![1.6, 1.2],
            path_start: [-1.0, 0.03],
            path_end: [2.0, 0.03],
            duration: 300,
            steps: 300,
            obstacles: vec![[0.0, 0.0]],
            seeds: vec![0],
            jitter: Jitter {
                joint: 0.0,
                obstacle: 0.02,
            },
            safety: SafetyConfig::default(),
            bound: SafetyBoundConfig::default(),
            mpc: MpcConfig {
                slack_weight: Some(1e6),
                ..MpcConfig::default()
            },
            base_decision: true,
            follow_gain: 1.0,
            model: floating_shape(),
        }
    }

    pub fn robot(&self) -> Result<FloatingRobot> {
        FloatingRobot::new(self.arm.build()?, self.base_radius, self.twist_limits)
    }

    pub fn plant(&self) -> Result<FloatingPlant> {
        FloatingPlant::new(self.robot()?, self.dt, self.lag)
    }

    pub fn mpc_config(&self) -> Result<MpcConfig> {
        let robot = self.robot()?;
        let n = robot.joint_count();
        let mut cfg = self.mpc.clone();
        if cfg.state_weights.is_empty() {
            // Posture, free heading, then the twist that follows the path.
            let mut w = vec![1.0; n];
            w.extend([0.0, 10.0, 10.0, 1.0]);
            cfg.state_weights = w;
        }
        if cfg.terminal_weights.is_empty() {
            cfg.terminal_weights = cfg.state_weights.clone();
        }
        if cfg.control_weights.is_empty() {
            let m = if self.base_decision {
                robot.control_dim()
            } else {
                n
            };
            cfg.control_weights = vec![0.01; m];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn path(&self) -> Vec<[f64; 2]> {
        (0..=self.steps)
            .map(|t| {
                let s = (t as f64 / self.duration.max(1) as f64).min(1.0);
                [
                    self.path_start[0] + (self.path_end[0] - self.path_start[0]) * s,
                    self.path_start[1] + (self.path_end[1] - self.path_start[1]) * s,
                ]
            })
            .collect()
    }

    /// Closest approach of the raw base path to any obstacle, measured from
    /// the base surface.
    pub fn raw_path_clearance(&self) -> f64 {
        self.path()
            .iter()
            .flat_map(|p| {
                self.obstacles
                    .iter()
                    .map(move |o| (p[0] - o[0]).hypot(p[1] - o[1]))
            })
            .fold(f64::INFINITY, f64::min)
            - self.base_radius
    }

    pub fn validate(&self) -> Result<()> {
        let robot = self.robot()?;
        if self.steps == 0 || self.seeds.is_empty() {
            return Err(Error::param("floating scenario needs steps and seeds"));
        }
        if self.q_nominal.len() != robot.joint_count() {
            return Err(Error::dims(
                "nominal posture",
                robot.joint_count(),
                self.q_nominal.len(),
            ));
        }
        if !(self.follow_gain >= 0.0) {
            return Err(Error::param("follow gain must be non-negative"));
        }
        self.plant()?;
        self.bound.validate()?;
        self.mpc_config()?;
        Ok(())
    }

    pub fn episode(&self, seed: u64, index: SafetyIndex) -> Result<FloatingEpisode> {
        self.validate()?;
        let robot = self.robot()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter =
            |rng: &mut ChaCha8Rng, h: f64| if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
        let q0 = DVector::from_iterator(
            self.q_nominal.len(),
            self.q_nominal
                .iter()
                .map(|q| q + jitter(&mut rng, self.jitter.joint))
                .collect::<Vec<_>>(),
        );
        let obstacles = self
            .obstacles
            .iter()
            .map(|o| {
                let p = vec![
                    o[0] + jitter(&mut rng, self.jitter.obstacle),
                    o[1] + jitter(&mut rng, self.jitter.obstacle),
                ];
                Obstacle::fixed(DVector::from_vec(p))
            })
            .collect();
        Ok(FloatingEpisode {
            plant: self.plant()?,
            initial: FloatingState::at_rest(
                &robot,
                q0,
                [self.path_start[0], self.path_start[1], 0.0],
            )?,
            obstacles,
            path: self.path(),
            q_nominal: DVector::from_column_slice(&self.q_nominal),
            steps: self.steps,
            index,
            bound: self.bound,
            mpc: self.mpc_config()?,
            base_decision: self.base_decision,
            follow_gain: self.follow_gain,
        })
    }

    /// Random rollouts of the floating plant for model training.
    pub fn dataset(&self, count: usize, horizon: usize, seed: u64) -> Result<Vec<Trajectory>> {
        sample_floating_dataset(&self.plant()?, count, horizon, seed)
    }

    /// Lifted model of the floating plant trained on `data`.
    pub fn train_model(
        &self,
        data: &[Trajectory],
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<KoopmanModel> {
        let mut spec = floating_model_spec(&self.robot()?, self.dt, seed);
        spec.hidden = self.model.hidden.clone();
        spec.latent = self.model.latent;
        Ok(train(&KoopmanModel::new(&spec)?, data, cfg)?.model)
    }
}

#[derive(Debug, Clone)]
pub struct FloatingRun {
    pub runs: Vec<(u64, FloatingLog)>,
    pub aggregate: MetricsRecord,
    /// Smallest base-surface distance to an obstacle over all seeds.
    pub base_clearance: f64,
}

pub fn run_floating_scenario(
    cfg: &FloatingScenarioConfig,
    model: &KoopmanModel,
    index: SafetyIndex,
    record_timing: bool,
) -> Result<FloatingRun> {
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let runs = seeds
        .iter()
        .map(|&seed| {
            let mut out = run_floating(model, &cfg.episode(seed, index)?)?;
            if !record_timing {
                strip_timing(&mut out.log);
            }
            Ok((seed, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(u64, &EpisodeLog)> = runs.iter().map(|(s, l)| (*s, &l.log)).collect();
    let aggregate = MetricsRecord::aggregate(&cfg.name, crate::mpc::ControllerKind::Kmpc, &refs);
    let base_clearance = runs
        .iter()
        .flat_map(|(_, l)| l.base_dist.iter().copied())
        .fold(f64::INFINITY, f64::min);
    Ok(FloatingRun {
        runs,
        aggregate,
        base_clearance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scenario::{Preset, ReferenceShape};
    use crate::mpc::ControllerKind;

    fn short(mut s: ScenarioConfig, steps: usize) -> ScenarioConfig {
        s.steps = steps;
        s.seeds = vec![2, 0, 1];
        s
    }

    #[test]
    fn obstacle_free_regulation_has_no_infeasible_steps() {
        let mut s = short(Preset::S1.scenario().unwrap(), 60);
        s.controller = ControllerKind::Ltv;
        s.reference = ReferenceShape::Line {
            start: vec![0.5, 0.4],
            end: vec![0.5, 0.4],
            duration: 1,
        };
        let run = run_scenario(&s, None, SafetyIndex::new(1.0, 0.1, 0.2).unwrap(), false).unwrap();
        assert_eq!(run.aggregate.infeasible_count, 0);
        assert_eq!(run.aggregate.total_steps, 180);
        assert!(!run.aborted());
        assert_eq!(
            run.runs.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn same_config_and_seed_give_identical_metrics() {
        let mut s = short(Preset::S2.scenario().unwrap(), 40);
        s.controller = ControllerKind::Ltv;
        let idx = SafetyIndex::new(1.0, 0.1, 0.2).unwrap();
        let a = run_scenario(&s, None, idx, false).unwrap();
        let b = run_scenario(&s, None, idx, false).unwrap();
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.aggregate, b.aggregate);
        assert_eq!(a.aggregate.solve_ms_mean, 0.0);
    }

    #[test]
    fn kmpc_requires_a_matching_model() {
        let s = short(Preset::S2.scenario().unwrap(), 5);
        let idx = SafetyIndex::new(1.0, 0.1, 0.2).unwrap();
        assert!(run_scenario(&s, None, idx, false).is_err());
    }

    #[test]
    fn floating_preset_path_crosses_the_obstacle() {
        let f = FloatingScenarioConfig::preset();
        f.validate().unwrap();
        assert!(f.raw_path_clearance() < f.safety.d_min);
        let text = toml::to_string(&f).unwrap();
        assert_eq!(toml::from_str::<FloatingScenarioConfig>(&text).unwrap(), f);
    }
}
