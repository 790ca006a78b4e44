use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::baseline::{build_lti, build_ltv, safety_filter};
use super::kmpc::{build_kmpc, SafetyContext};
use super::shooting::{shooting_nmpc, ArmShooting, CemConfig};
use super::MpcConfig;
use crate::error::{Error, Result};
use crate::kinematics::{Plant, PlantState};
use crate::koopnet::KoopmanModel;
use crate::qp::{QpSolver, QpStatus};
use crate::safety::{analytic_rows, clearance, Obstacle, SafetyBoundConfig, SafetyIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Kmpc,
    Lti,
    Ltv,
    Nmpc,
}

impl ControllerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kmpc => "kmpc",
            Self::Lti => "lti",
            Self::Ltv => "ltv",
            Self::Nmpc => "nmpc",
        }
    }
}

/// A controller together with the data it needs.
#[derive(Debug, Clone)]
pub enum ControllerSpec {
    Kmpc(Box<KoopmanModel>),
    Lti { q_star: DVector<f64> },
    Ltv,
    Nmpc { cem: CemConfig, penalty: f64 },
}

impl ControllerSpec {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Self::Kmpc(_) => ControllerKind::Kmpc,
            Self::Lti { .. } => ControllerKind::Lti,
            Self::Ltv => ControllerKind::Ltv,
            Self::Nmpc { .. } => ControllerKind::Nmpc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ObstacleMotion {
    Static,
    /// Moves toward the centre of sphere `link` at `speed` until its
    /// clearance to that sphere reaches `standoff`.
    Chase {
        link: usize,
        speed: f64,
        standoff: f64,
    },
}

/// One closed-loop run. `reference[t]` is the desired state at time `t`;
/// windows past the end repeat the last entry.
#[derive(Debug, Clone)]
pub struct Episode {
    pub plant: Plant,
    pub initial_q: DVector<f64>,
    pub obstacles: Vec<Obstacle>,
    pub motions: Vec<ObstacleMotion>,
    pub reference: Vec<DVector<f64>>,
    pub steps: usize,
    pub index: SafetyIndex,
    pub bound: SafetyBoundConfig,
    pub mpc: MpcConfig,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("episode needs at least one step"));
        }
        if self.reference.is_empty() {
            return Err(Error::param("episode reference is empty"));
        }
        if self.motions.len() != self.obstacles.len() {
            return Err(Error::dims(
                "obstacle motions",
                self.obstacles.len(),
                self.motions.len(),
            ));
        }
        let w = self.plant.chain.workspace_dim();
        for o in &self.obstacles {
            if o.position.len() != w || o.velocity.len() != w {
                return Err(Error::dims("obstacle position", w, o.position.len()));
            }
        }
        for m in &self.motions {
            if let ObstacleMotion::Chase {
                link,
                speed,
                standoff,
            } = m
            {
                if *link >= self.plant.chain.sphere_count()
                    || !(*speed >= 0.0)
                    || !(*standoff >= 0.0)
                {
                    return Err(Error::param("invalid chase parameters"));
                }
            }
        }
        self.bound.validate()?;
        self.mpc.validate()
    }

    fn window(&self, t: usize) -> Vec<DVector<f64>> {
        let last = self.reference.len() - 1;
        (1..=self.mpc.horizon)
            .map(|k| self.reference[(t + k).min(last)].clone())
            .collect()
    }

    fn target(&self, t: usize) -> &DVector<f64> {
        &self.reference[t.min(self.reference.len() - 1)]
    }
}

pub type StepStatus = QpStatus;

/// Record of one control step; distances and φ refer to the state reached
/// after applying `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerStep {
    pub t: usize,
    pub status: StepStatus,
    pub infeasible: bool,
    pub solve_ms: f64,
    /// Stage tracking cost `‖x - x_des‖²_Q`.
    pub cost: f64,
    /// Per-sphere `d_min - d`, worst over obstacles.
    pub link_phi: Vec<f64>,
    pub max_phi: f64,
    pub mean_phi: f64,
    pub min_dist: f64,
    pub u: DVector<f64>,
    pub slack_total: f64,
    pub tip: DVector<f64>,
    pub target: DVector<f64>,
    pub target_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub kind: ControllerKind,
    pub steps: Vec<ControllerStep>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

fn advance_obstacles(
    obstacles: &mut [Obstacle],
    motions: &[ObstacleMotion],
    plant: &Plant,
    q: &DVector<f64>,
    dt: f64,
) -> Result<()> {
    let centres = plant.chain.forward_kinematics(q)?;
    for (o, m) in obstacles.iter_mut().zip(motions) {
        o.position += &o.velocity * dt;
        if let ObstacleMotion::Chase {
            link,
            speed,
            standoff,
        } = m
        {
            let to = &centres[*link] - &o.position;
            let gap = to.norm() - plant.chain.sphere_radius(*link);
            o.velocity = if gap > *standoff && to.norm() > 0.0 {
                to.normalize() * (*speed).min((gap - standoff) / dt)
            } else {
                DVector::zeros(o.position.len())
            };
        }
    }
    Ok(())
}

struct Decision {
    u: DVector<f64>,
    status: QpStatus,
    infeasible: bool,
    slack_total: f64,
}

/// Runs `spec` on `episode` from rest. A non-finite state or an internal
/// error ends the run early with the steps logged so far.
pub fn run_controller(spec: &ControllerSpec, episode: &Episode) -> Result<EpisodeLog> {
    episode.validate()?;
    let plant = &episode.plant;
    let chain = &plant.chain;
    let solver = QpSolver::new(episode.mpc.qp);
    let mut state = PlantState::at_rest(chain, episode.initial_q.clone())?;
    let mut obstacles = episode.obstacles.clone();
    // Chasers get their first heading before the first step.
    advance_obstacles(&mut obstacles, &episode.motions, plant, &state.q, 0.0)?;
    let mut plan: Option<Vec<DVector<f64>>> = None;
    let mut log = EpisodeLog {
        kind: spec.kind(),
        steps: Vec::with_capacity(episode.steps),
        aborted: None,
    };
    let w = chain.workspace_dim();
    for t in 0..episode.steps {
        let x = state.to_vector();
        let window = episode.window(t);
        let start = Instant::now();
        let decision = match decide(
            spec, episode, &solver, &state, &x, &window, &obstacles, &mut plan,
        ) {
            Ok(d) => d,
            Err(e) => {
                log.aborted = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let next = plant.step(&state, &decision.u)?;
        if next.q.iter().chain(next.p.iter()).any(|v| !v.is_finite()) {
            log.aborted = Some(format!("step {t}: non-finite plant state"));
            break;
        }
        state = next;
        advance_obstacles(&mut obstacles, &episode.motions, plant, &state.q, plant.dt)?;
        let spheres = chain.sphere_geometry(&state.q)?;
        let (link_phi, min_dist) = clearance(&spheres, &obstacles, episode.index.d_min);
        let max_phi = link_phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean_phi = link_phi.iter().sum::<f64>() / link_phi.len() as f64;
        let target = episode.target(t + 1);
        let xn = state.to_vector();
        let cost = xn
            .iter()
            .zip(target.iter())
            .zip(&episode.mpc.state_weights)
            .map(|((x, r), q)| q * (x - r) * (x - r))
            .sum();
        let target_tip = target.rows(0, w).into_owned();
        log.steps.push(ControllerStep {
            t,
            status: decision.status,
            infeasible: decision.infeasible,
            solve_ms,
            cost,
            link_phi,
            max_phi,
            mean_phi,
            min_dist,
            u: decision.u,
            slack_total: decision.slack_total,
            target_dist: (&state.p - &target_tip).norm(),
            tip: state.p.clone(),
            target: target_tip,
        });
    }
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn decide(
    spec: &ControllerSpec,
    episode: &Episode,
    solver: &QpSolver,
    state: &PlantState,
    x: &DVector<f64>,
    window: &[DVector<f64>],
    obstacles: &[Obstacle],
    plan: &mut Option<Vec<DVector<f64>>>,
) -> Result<Decision> {
    let chain = &episode.plant.chain;
    let dt = episode.plant.dt;
    let m = chain.joint_count();
    let fallback = chain.clamp_control(&(&state.u_prev * 0.5));
    let qp = match spec {
        ControllerSpec::Kmpc(model) => {
            let ctx = SafetyContext {
                chain,
                obstacles,
                index: episode.index,
                bound: episode.bound,
            };
            let prob = build_kmpc(model, &ctx, x, window, &episode.mpc)?;
            let warm = plan
                .as_ref()
                .map(|p| shifted_plan(p, m, prob.qp.var_count()));
            let out = solver.solve(&prob.qp, warm.as_ref())?;
            *plan = out
                .solution
                .as_ref()
                .map(|y| {
                    y.rows(0, m * episode.mpc.horizon)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .map(|v| v.chunks(m).map(DVector::from_column_slice).collect());
            return Ok(match (&out.solution, out.counts_as_infeasible()) {
                (Some(y), false) => Decision {
                    u: chain.clamp_control(&y.rows(0, m).into_owned()),
                    status: out.status,
                    infeasible: false,
                    slack_total: out.slack_total(),
                },
                _ => Decision {
                    u: fallback,
                    status: out.status,
                    infeasible: out.counts_as_infeasible(),
                    slack_total: 0.0,
                },
            });
        }
        ControllerSpec::Lti { q_star } => build_lti(chain, q_star, x, window, &episode.mpc, dt)?,
        ControllerSpec::Ltv => build_ltv(chain, x, window, &episode.mpc, dt)?,
        ControllerSpec::Nmpc { cem, penalty } => {
            let problem = ArmShooting {
                plant: &episode.plant,
                state: state.clone(),
                reference: window,
                cfg: &episode.mpc,
                obstacles,
                d_min: episode.index.d_min,
                penalty: *penalty,
            };
            // Shift the previous plan forward as the sampling mean.
            let warm = plan.as_ref().map(|p| {
                let mut s: Vec<_> = p.iter().skip(1).cloned().collect();
                s.push(p.last().cloned().unwrap_or_else(|| DVector::zeros(m)));
                s
            });
            let result = shooting_nmpc(&problem, cem, warm.as_deref())?;
            let u_ref = result.controls[0].clone();
            *plan = Some(result.controls);
            return filter(episode, solver, state, obstacles, &u_ref, &fallback);
        }
    };
    let out = solver.solve(&qp, None)?;
    let u_ref = match out.solution {
        Some(y) => chain.clamp_control(&y.rows(0, m).into_owned()),
        None => fallback.clone(),
    };
    filter(episode, solver, state, obstacles, &u_ref, &fallback)
}

/// Previous control plan advanced one step, last control repeated, slacks
/// zeroed.
fn shifted_plan(plan: &[DVector<f64>], m: usize, vars: usize) -> DVector<f64> {
    let mut w = DVector::zeros(vars);
    for (k, u) in plan.iter().skip(1).chain(plan.last()).enumerate() {
        w.rows_mut(k * m, m).copy_from(u);
    }
    w
}

fn filter(
    episode: &Episode,
    solver: &QpSolver,
    state: &PlantState,
    obstacles: &[Obstacle],
    u_ref: &DVector<f64>,
    fallback: &DVector<f64>,
) -> Result<Decision> {
    let chain = &episode.plant.chain;
    let rows = analytic_rows(
        chain,
        &state.q,
        obstacles,
        &episode.index,
        &episode.bound,
        episode.plant.dt,
    )?;
    let out = safety_filter(
        u_ref,
        &rows,
        &chain.u_min(),
        &chain.u_max(),
        episode.mpc.slack_weight,
        solver,
        fallback,
    )?;
    Ok(Decision {
        u: out.u,
        status: out.status,
        infeasible: out.infeasible,
        slack_total: out.slack_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{JointLayout, SerialChain};
    use crate::koopnet::ModelSpec;

    fn chain() -> SerialChain {
        SerialChain::symmetric(JointLayout::PlanarZ, vec![0.5, 0.4], vec![0.05; 2], 1.0).unwrap()
    }

    fn episode(obstacles: Vec<Obstacle>, steps: usize) -> Episode {
        let chain = chain();
        let q0 = DVector::from_vec(vec![0.3, 0.8]);
        let x0 = PlantState::at_rest(&chain, q0.clone()).unwrap().to_vector();
        let motions = vec![ObstacleMotion::Static; obstacles.len()];
        Episode {
            plant: Plant::new(chain, 0.05, 1.0).unwrap(),
            initial_q: q0,
            obstacles,
            motions,
            reference: vec![x0],
            steps,
            index: SafetyIndex::signed_distance(0.2).unwrap(),
            bound: SafetyBoundConfig::default(),
            mpc: MpcConfig::tip_tracking(2, 2, 10.0, 0.0, 0.01),
        }
    }

    fn integrator_model(ep: &Episode) -> KoopmanModel {
        let mut spec = ModelSpec::for_arm(&ep.plant.chain, 0.05, 2);
        spec.hidden = vec![4];
        spec.latent = 2;
        let mut model = KoopmanModel::new(&spec).unwrap();
        let jt = ep.plant.chain.position_jacobian(&ep.initial_q, 2).unwrap();
        model.b.view_mut((0, 0), (2, 2)).copy_from(&(jt * 0.05));
        model
    }

    #[test]
    fn regulation_at_rest_costs_nothing() {
        let ep = episode(Vec::new(), 50);
        for spec in [
            ControllerSpec::Ltv,
            ControllerSpec::Kmpc(Box::new(integrator_model(&ep))),
        ] {
            let log = run_controller(&spec, &ep).unwrap();
            assert!(log.aborted.is_none());
            let total: f64 = log.steps.iter().map(|s| s.cost).sum();
            assert!(total < 1e-6, "{total}");
            assert!(log.steps.iter().all(|s| !s.infeasible));
        }
    }

    #[test]
    fn controls_stay_within_limits_and_runs_repeat() {
        let mut ep = episode(
            vec![Obstacle::fixed(DVector::from_vec(vec![0.5, 0.55]))],
            80,
        );
        let far = PlantState::at_rest(&ep.plant.chain, DVector::from_vec(vec![1.2, 0.3]))
            .unwrap()
            .to_vector();
        ep.reference = vec![far];
        let spec = ControllerSpec::Kmpc(Box::new(integrator_model(&ep)));
        let a = run_controller(&spec, &ep).unwrap();
        let b = run_controller(&spec, &ep).unwrap();
        let strip = |l: &EpisodeLog| {
            l.steps
                .iter()
                .map(|s| (s.u.clone(), s.cost, s.min_dist))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        for s in &a.steps {
            assert!(s.u.iter().all(|u| u.abs() <= 1.0));
        }
    }

    #[test]
    fn chaser_closes_in_and_stops_at_standoff() {
        let mut ep = episode(
            vec![Obstacle::fixed(DVector::from_vec(vec![1.5, 1.5]))],
            200,
        );
        ep.motions = vec![ObstacleMotion::Chase {
            link: 2,
            speed: 0.5,
            standoff: 0.3,
        }];
        let log = run_controller(&ControllerSpec::Ltv, &ep).unwrap();
        let last = log.steps.last().unwrap();
        assert!((last.min_dist - 0.3).abs() < 0.05, "{}", last.min_dist);
    }

    #[test]
    fn shooting_controller_runs() {
        let ep = episode(
            vec![Obstacle::fixed(DVector::from_vec(vec![0.5, 0.55]))],
            10,
        );
        let spec = ControllerSpec::Nmpc {
            cem: CemConfig {
                samples: 20,
                ..CemConfig::default()
            },
            penalty: 1e3,
        };
        let log = run_controller(&spec, &ep).unwrap();
        assert_eq!(log.steps.len(), 10);
    }
}
