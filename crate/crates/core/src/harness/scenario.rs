use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointLayout, Plant, PlantState, SerialChain};
use crate::koopnet::KoopmanModel;
use crate::mpc::{CemConfig, ControllerKind, ControllerSpec, Episode, MpcConfig, ObstacleMotion};
use crate::safety::{Obstacle, SafetyBoundConfig, SafetyIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub layout: JointLayout,
    pub link_lengths: Vec<f64>,
    pub collision_radii: Vec<f64>,
    pub velocity_limit: f64,
}

impl ChainConfig {
    pub fn build(&self) -> Result<SerialChain> {
        SerialChain::symmetric(
            self.layout,
            self.link_lengths.clone(),
            self.collision_radii.clone(),
            self.velocity_limit,
        )
    }

    pub fn planar_two_link() -> Self {
        Self {
            layout: JointLayout::PlanarZ,
            link_lengths: vec![0.5, 0.4],
            collision_radii: vec![0.05, 0.05],
            velocity_limit: 1.0,
        }
    }

    pub fn spatial_seven_link() -> Self {
        Self {
            layout: JointLayout::AlternatingZY,
            link_lengths: vec![0.3, 0.25, 0.25, 0.2, 0.2, 0.15, 0.1],
            collision_radii: vec![0.06, 0.05, 0.05, 0.05, 0.04, 0.04, 0.03],
            velocity_limit: 1.0,
        }
    }
}

fn static_motion() -> ObstacleMotion {
    ObstacleMotion::Static
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub position: Vec<f64>,
    #[serde(default = "static_motion")]
    pub motion: ObstacleMotion,
}

/// Desired tip paths. Planar shapes live in the XY plane; in 3D the third
/// coordinate is taken from `center` or `start`. `duration` and `period`
/// are in control steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceShape {
    /// Straight segment traversed in `duration` steps, then held.
    Line {
        start: Vec<f64>,
        end: Vec<f64>,
        duration: usize,
    },
    Circle {
        center: Vec<f64>,
        radius: f64,
        period: usize,
    },
    /// Segment from `start` to `end` with a sinusoidal lateral offset.
    Sine {
        start: Vec<f64>,
        end: Vec<f64>,
        amplitude: f64,
        cycles: f64,
        duration: usize,
    },
    /// Five-pointed star polygon.
    Star {
        center: Vec<f64>,
        radius: f64,
        period: usize,
    },
    Spiral {
        center: Vec<f64>,
        start_radius: f64,
        end_radius: f64,
        turns: f64,
        duration: usize,
    },
}

fn lerp(a: &[f64], b: &[f64], s: f64) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().zip(b).map(|(a, b)| a + (b - a) * s))
}

fn planar_offset(center: &[f64], dx: f64, dy: f64) -> DVector<f64> {
    let mut p = DVector::from_column_slice(center);
    p[0] += dx;
    p[1] += dy;
    p
}

impl ReferenceShape {
    fn anchor(&self) -> &[f64] {
        match self {
            Self::Line { start, .. } | Self::Sine { start, .. } => start,
            Self::Circle { center, .. }
            | Self::Star { center, .. }
            | Self::Spiral { center, .. } => center,
        }
    }

    fn validate(&self, w: usize) -> Result<()> {
        let dims_ok = match self {
            Self::Line { start, end, .. } | Self::Sine { start, end, .. } => {
                start.len() == w && end.len() == w
            }
            _ => self.anchor().len() == w,
        };
        if !dims_ok {
            return Err(Error::param(format!(
                "reference points must have {w} coordinates"
            )));
        }
        let timing_ok = match self {
            Self::Line { duration, .. }
            | Self::Sine { duration, .. }
            | Self::Spiral { duration, .. } => *duration > 0,
            Self::Circle { period, .. } | Self::Star { period, .. } => *period > 0,
        };
        if !timing_ok {
            return Err(Error::param(
                "reference duration and period must be positive",
            ));
        }
        Ok(())
    }

    /// Tip target at step `t`.
    pub fn point(&self, t: usize) -> DVector<f64> {
        match self {
            Self::Line {
                start,
                end,
                duration,
            } => lerp(start, end, (t as f64 / *duration as f64).min(1.0)),
            Self::Circle {
                center,
                radius,
                period,
            } => {
                let a = TAU * t as f64 / *period as f64;
                planar_offset(center, radius * a.cos(), radius * a.sin())
            }
            Self::Sine {
                start,
                end,
                amplitude,
                cycles,
                duration,
            } => {
                let s = (t as f64 / *duration as f64).min(1.0);
                let mut p = lerp(start, end, s);
                let (dx, dy) = (end[0] - start[0], end[1] - start[1]);
                let len = dx.hypot(dy);
                if len > 0.0 {
                    let off = amplitude * (TAU * cycles * s).sin();
                    p[0] += -dy / len * off;
                    p[1] += dx / len * off;
                }
                p
            }
            Self::Star {
                center,
                radius,
                period,
            } => {
                // Vertices visited in the order 0, 2, 4, 1, 3 of a pentagon.
                let vertex = |k: usize| {
                    let a = PI / 2.0 + TAU * ((2 * k) % 5) as f64 / 5.0;
                    (radius * a.cos(), radius * a.sin())
                };
                let phase = (t % period) as f64 / *period as f64 * 5.0;
                let k = phase.floor() as usize;
                let s = phase - k as f64;
                let (a, b) = (vertex(k), vertex(k + 1));
                planar_offset(center, a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s)
            }
            Self::Spiral {
                center,
                start_radius,
                end_radius,
                turns,
                duration,
            } => {
                let s = (t as f64 / *duration as f64).min(1.0);
                let r = start_radius + (end_radius - start_radius) * s;
                let a = TAU * turns * s;
                planar_offset(center, r * a.cos(), r * a.sin())
            }
        }
    }

    pub fn points(&self, steps: usize) -> Vec<DVector<f64>> {
        (0..=steps).map(|t| self.point(t)).collect()
    }
}

/// Where the safety-index parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum GammaSource {
    Initial {
        n: f64,
        beta: f64,
    },
    /// JSON file written by the tuner, relative paths resolved against the
    /// run's base directory.
    File {
        path: PathBuf,
    },
}

impl Default for GammaSource {
    fn default() -> Self {
        Self::Initial { n: 1.0, beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub d_min: f64,
    pub gamma: GammaSource,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            d_min: 0.2,
            gamma: GammaSource::default(),
        }
    }
}

impl SafetyConfig {
    pub fn resolve(&self, base: &Path) -> Result<SafetyIndex> {
        match &self.gamma {
            GammaSource::Initial { n, beta } => SafetyIndex::new(*n, *beta, self.d_min),
            GammaSource::File { path } => {
                let tuned = load_index(&base.join(path))?;
                SafetyIndex::new(tuned.n, tuned.beta, self.d_min)
            }
        }
    }
}

pub fn save_index(index: &SafetyIndex, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(index)? + "\n")?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<SafetyIndex> {
    let text = std::fs::read_to_string(path)?;
    let raw: SafetyIndex = serde_json::from_str(&text)?;
    SafetyIndex::new(raw.n, raw.beta, raw.d_min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingWeights {
    pub tip: f64,
    pub joint: f64,
    pub control: f64,
}

impl Default for TrackingWeights {
    fn default() -> Self {
        Self {
            tip: 10.0,
            joint: 0.0,
            control: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShootingConfig {
    pub cem: CemConfig,
    /// Weight of the squared penetration of the `d_min` shell.
    pub penalty: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            cem: CemConfig::default(),
            penalty: 1e3,
        }
    }
}

/// Seeded perturbations applied per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    /// Half-width of the uniform offset on every initial joint angle (rad).
    pub joint: f64,
    /// Half-width of the uniform offset on every obstacle coordinate (m).
    pub obstacle: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            joint: 0.1,
            obstacle: 0.03,
        }
    }
}

/// One experiment: robot, obstacles, reference, controller and the seeds
/// to run it under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub chain: ChainConfig,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_lag")]
    pub lag: f64,
    /// Plant mismatch; when set, `plant()` differs from `nominal_plant()`.
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
    pub initial_q: Vec<f64>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleConfig>,
    pub reference: ReferenceShape,
    pub steps: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub jitter: Jitter,
    pub controller: ControllerKind,
    #[serde(default)]
    pub safety: SafetyConfig,
    #[serde(default)]
    pub bound: SafetyBoundConfig,
    #[serde(default)]
    pub weights: TrackingWeights,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub shooting: ShootingConfig,
}

/// Changes applied to the simulated robot but not to the nominal one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Multiplies each link length.
    #[serde(default)]
    pub length_scale: Vec<f64>,
    /// Replaces the actuator lag.
    pub lag: Option<f64>,
}

fn default_dt() -> f64 {
    0.05
}

fn default_lag() -> f64 {
    0.7
}

impl ScenarioConfig {
    pub fn chain(&self) -> Result<SerialChain> {
        self.chain.build()
    }

    /// The robot the models are trained on.
    pub fn nominal_plant(&self) -> Result<Plant> {
        Plant::new(self.chain()?, self.dt, self.lag)
    }

    /// The simulated robot, with the perturbation applied.
    pub fn plant(&self) -> Result<Plant> {
        let Some(p) = &self.perturbation else {
            return self.nominal_plant();
        };
        let mut chain = self.chain()?;
        if !p.length_scale.is_empty() {
            chain = chain.with_scaled_lengths(&p.length_scale)?;
        }
        Plant::new(chain, self.dt, p.lag.unwrap_or(self.lag))
    }

    /// MPC settings with the tracking weights filled in when the explicit
    /// weight vectors are left empty.
    pub fn mpc_config(&self) -> Result<MpcConfig> {
        let chain = self.chain()?;
        let mut cfg = self.mpc.clone();
        let defaults = MpcConfig::tip_tracking(
            chain.workspace_dim(),
            chain.joint_count(),
            self.weights.tip,
            self.weights.joint,
            self.weights.control,
        );
        if cfg.state_weights.is_empty() {
            cfg.state_weights = defaults.state_weights.clone();
        }
        if cfg.terminal_weights.is_empty() {
            cfg.terminal_weights = cfg.state_weights.clone();
        }
        if cfg.control_weights.is_empty() {
            cfg.control_weights = defaults.control_weights;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let chain = self.chain()?;
        let w = chain.workspace_dim();
        if self.steps == 0 {
            return Err(Error::param("episode length must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::param("scenario needs at least one seed"));
        }
        if self.initial_q.len() != chain.joint_count() {
            return Err(Error::dims(
                "initial joint angles",
                chain.joint_count(),
                self.initial_q.len(),
            ));
        }
        if !(self.jitter.joint >= 0.0 && self.jitter.obstacle >= 0.0) {
            return Err(Error::param("jitter must be non-negative"));
        }
        for o in &self.obstacles {
            if o.position.len() != w {
                return Err(Error::dims("obstacle position", w, o.position.len()));
            }
        }
        self.reference.validate(w)?;
        let reach = chain.reach();
        if let Some(bad) = self
            .reference
            .points(self.steps)
            .iter()
            .find(|p| p.norm() > reach)
        {
            return Err(Error::param(format!(
                "reference point {:?} lies outside the reachable radius {reach}",
                bad.as_slice()
            )));
        }
        self.plant()?;
        self.bound.validate()?;
        self.shooting.cem.validate()?;
        SafetyIndex::new(1.0, 0.0, self.safety.d_min)?;
        self.mpc_config()?.validate()
    }

    /// Concrete episode for one seed with the given safety index.
    pub fn episode(&self, seed: u64, index: SafetyIndex) -> Result<Episode> {
        self.validate()?;
        let plant = self.plant()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter =
            |rng: &mut ChaCha8Rng, h: f64| if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
        let initial_q = DVector::from_iterator(
            self.initial_q.len(),
            self.initial_q
                .iter()
                .map(|q| q + jitter(&mut rng, self.jitter.joint))
                .collect::<Vec<_>>(),
        );
        let obstacles: Vec<Obstacle> = self
            .obstacles
            .iter()
            .map(|o| {
                let p = o
                    .position
                    .iter()
                    .map(|c| c + jitter(&mut rng, self.jitter.obstacle))
                    .collect::<Vec<_>>();
                Obstacle::fixed(DVector::from_vec(p))
            })
            .collect();
        let motions = self.obstacles.iter().map(|o| o.motion.clone()).collect();
        // Joint entries of the reference repeat the start so a joint weight
        // acts as posture regularisation.
        let start = PlantState::at_rest(&plant.chain, initial_q.clone())?.to_vector();
        let w = plant.chain.workspace_dim();
        let reference = self
            .reference
            .points(self.steps)
            .into_iter()
            .map(|p| {
                let mut x = start.clone();
                x.rows_mut(0, w).copy_from(&p);
                x
            })
            .collect();
        Ok(Episode {
            plant,
            initial_q,
            obstacles,
            motions,
            reference,
            steps: self.steps,
            index,
            bound: self.bound,
            mpc: self.mpc_config()?,
        })
    }

    /// Controller for this scenario. KMPC requires `model`; the LTI
    /// baseline linearises at the nominal start configuration.
    pub fn controller_spec(&self, model: Option<&KoopmanModel>) -> Result<ControllerSpec> {
        Ok(match self.controller {
            ControllerKind::Kmpc => {
                let model = model
                    .ok_or_else(|| Error::param("the kmpc controller needs a trained model"))?;
                let chain = self.chain()?;
                if model.state_dim() != chain.state_dim()
                    || model.control_dim() != chain.joint_count()
                {
                    return Err(Error::dims(
                        "model state",
                        chain.state_dim(),
                        model.state_dim(),
                    ));
                }
                ControllerSpec::Kmpc(Box::new(model.clone()))
            }
            ControllerKind::Lti => ControllerSpec::Lti {
                q_star: DVector::from_column_slice(&self.initial_q),
            },
            ControllerKind::Ltv => ControllerSpec::Ltv,
            ControllerKind::Nmpc => ControllerSpec::Nmpc {
                cem: self.shooting.cem.clone(),
                penalty: self.shooting.penalty,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Self::S1),
            "s2" => Ok(Self::S2),
            "s3" => Ok(Self::S3),
            "s4" => Ok(Self::S4),
            "s5" => Ok(Self::S5),
            other => Err(Error::param(format!("unknown preset {other}"))),
        }
    }
}

/// Chases sphere `link` at `speed` until its clearance reaches `standoff`.
pub fn chaser(position: Vec<f64>, link: usize, speed: f64, standoff: f64) -> ObstacleConfig {
    ObstacleConfig {
        position,
        motion: ObstacleMotion::Chase {
            link,
            speed,
            standoff,
        },
    }
}

pub fn fixed(position: Vec<f64>) -> ObstacleConfig {
    ObstacleConfig {
        position,
        motion: ObstacleMotion::Static,
    }
}

fn base_scenario(
    name: &str,
    chain: ChainConfig,
    initial_q: Vec<f64>,
    reference: ReferenceShape,
) -> ScenarioConfig {
    ScenarioConfig {
        name: name.into(),
        chain,
        dt: default_dt(),
        lag: default_lag(),
        perturbation: None,
        initial_q,
        obstacles: Vec::new(),
        reference,
        steps: 1000,
        seeds: vec![0, 1, 2, 3, 4],
        jitter: Jitter::default(),
        controller: ControllerKind::Kmpc,
        safety: SafetyConfig::default(),
        bound: SafetyBoundConfig::default(),
        weights: TrackingWeights::default(),
        mpc: MpcConfig::default(),
        shooting: ShootingConfig::default(),
    }
}

impl Preset {
    /// Arm scenarios. `S5` is the floating-base suite and has its own
    /// configuration type.
    pub fn scenario(self) -> Result<ScenarioConfig> {
        let planar_q = vec![0.4, 1.2];
        Ok(match self {
            Self::S1 => base_scenario(
                "s1",
                ChainConfig::planar_two_link(),
                planar_q,
                ReferenceShape::Circle {
                    center: vec![0.35, 0.3],
                    radius: 0.2,
                    period: 200,
                },
            ),
            Self::S2 => {
                // The tip sweeps back and forth through the obstacle.
                let mut s = base_scenario(
                    "s2",
                    ChainConfig::planar_two_link(),
                    planar_q,
                    ReferenceShape::Circle {
                        center: vec![0.0, 0.0],
                        radius: 0.6,
                        period: 400,
                    },
                );
                s.obstacles = vec![fixed(vec![-0.45, 0.45])];
                s
            }
            Self::S3 => {
                let mut s = base_scenario(
                    "s3",
                    ChainConfig::spatial_seven_link(),
                    vec![0.0, -0.6, 0.3, 0.8, 0.0, 0.5, 0.0],
                    ReferenceShape::Circle {
                        center: vec![0.0, 0.0, 0.5],
                        radius: 0.6,
                        period: 400,
                    },
                );
                s.obstacles = vec![
                    chaser(vec![0.9, 0.9, 0.9], 4, 0.2, 0.3),
                    fixed(vec![-0.6, 0.4, 0.5]),
                    fixed(vec![0.2, -0.75, 0.45]),
                    fixed(vec![-0.5, -0.5, 0.9]),
                    fixed(vec![0.7, 0.0, 1.2]),
                    fixed(vec![-0.9, 0.0, 0.2]),
                ];
                s
            }
            Self::S4 => {
                let mut s = base_scenario(
                    "s4",
                    ChainConfig::planar_two_link(),
                    planar_q,
                    transfer_references()[2].clone(),
                );
                s.perturbation = Some(Perturbation {
                    length_scale: vec![1.05, 0.95],
                    lag: Some(0.1),
                });
                s
            }
            Self::S5 => {
                return Err(Error::param(
                    "s5 is a floating-base scenario; use the floating suite",
                ))
            }
        })
    }
}

/// The five tip paths of the transfer study: line, circle, sine, star and
/// spiral, all inside the planar arm's workspace.
pub fn transfer_references() -> Vec<ReferenceShape> {
    vec![
        ReferenceShape::Line {
            start: vec![0.6, -0.2],
            end: vec![0.1, 0.6],
            duration: 200,
        },
        ReferenceShape::Circle {
            center: vec![0.3, 0.3],
            radius: 0.2,
            period: 200,
        },
        ReferenceShape::Sine {
            start: vec![0.6, -0.3],
            end: vec![-0.2, 0.6],
            amplitude: 0.1,
            cycles: 2.0,
            duration: 300,
        },
        ReferenceShape::Star {
            center: vec![0.3, 0.3],
            radius: 0.25,
            period: 250,
        },
        ReferenceShape::Spiral {
            center: vec![0.3, 0.3],
            start_radius: 0.05,
            end_radius: 0.25,
            turns: 2.0,
            duration: 300,
        },
    ]
}
