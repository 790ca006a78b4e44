use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::robot::{body_geometry, FloatingPlant, FloatingRobot, FloatingState};
use crate::error::{Error, Result};
use crate::koopnet::{KoopmanModel, ModelSpec, StateLayout};
use crate::mpc::{tracking_qp, Condensed, ControllerKind, ControllerStep, EpisodeLog, MpcConfig};
use crate::qp::{QpProblem, QpSolver};
use crate::safety::{
    clearance, kinematic_row, proximity, safety_bound, Obstacle, PhiDotRow, SafetyBound,
    SafetyBoundConfig, SafetyIndex,
};

/// Model shape for the predictive state `[q; θ; twist]` under inputs
/// `[twist command; q̇]`.
pub fn floating_model_spec(robot: &FloatingRobot, dt: f64, seed: u64) -> ModelSpec {
    let n = robot.joint_count();
    ModelSpec {
        layout: StateLayout {
            dim: robot.state_dim(),
            joint_offset: 0,
            joint_count: n,
        },
        control_dim: robot.control_dim(),
        hidden: vec![32, 32],
        latent: 8,
        dt,
        integrators: (0..n).map(|j| (j, 3 + j)).collect(),
        seed,
    }
}

/// How the base twist enters the program.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseMode {
    /// The twist command is fixed; only joint velocities are decided and
    /// the measured twist is drift in every safety row.
    Measured { command: DVector<f64> },
    /// The twist command joins the decision vector.
    Decision,
}

#[derive(Debug, Clone)]
pub struct FloatingProblem {
    pub qp: QpProblem,
    /// Decision entries per horizon step.
    pub block: usize,
    /// One row per (body, obstacle, step), in that nesting order.
    pub rows: Vec<(usize, PhiDotRow)>,
}

/// Condensed lifted-model MPC for the floating robot. Body geometry,
/// Jacobians and the measured twist are taken once at `state` and reused
/// on every horizon step.
#[allow(clippy::too_many_arguments)]
pub fn build_floating_kmpc(
    model: &KoopmanModel,
    robot: &FloatingRobot,
    state: &FloatingState,
    obstacles: &[Obstacle],
    index: &SafetyIndex,
    bound: &SafetyBoundConfig,
    cfg: &MpcConfig,
    reference: &[DVector<f64>],
    mode: &BaseMode,
) -> Result<FloatingProblem> {
    cfg.validate()?;
    if model.state_dim() != robot.state_dim() || model.control_dim() != robot.control_dim() {
        return Err(Error::dims(
            "floating model",
            robot.control_dim(),
            model.control_dim(),
        ));
    }
    let n = robot.joint_count();
    let x0 = state.predictive();
    let z0 = model.lift(&x0)?;
    let nx = model.state_dim();
    let (block, lo, hi, cond) = match mode {
        BaseMode::Measured { command } => {
            if command.len() != 3 {
                return Err(Error::dims("twist command", 3, command.len()));
            }
            let bq = model.b.columns(3, n).into_owned();
            let mut cond = Condensed::new(&model.a, &bq, &z0, nx, cfg.horizon)?;
            cond.add_known_input(
                &model.a,
                &model.b.columns(0, 3).into_owned(),
                &robot
                    .clamp_control(&{
                        let mut u = DVector::zeros(robot.control_dim());
                        u.rows_mut(0, 3).copy_from(command);
                        u
                    })
                    .rows(0, 3)
                    .into_owned(),
            )?;
            (n, robot.arm.u_min(), robot.arm.u_max(), cond)
        }
        BaseMode::Decision => {
            let cond = Condensed::new(&model.a, &model.b, &z0, nx, cfg.horizon)?;
            (robot.control_dim(), robot.u_min(), robot.u_max(), cond)
        }
    };
    let mut qp = tracking_qp(&cond, cfg, reference, &lo, &hi)?;
    let dt = model.dt;
    let vars = cond.decision_dim();
    let mut rows = Vec::new();
    for (bi, body) in body_geometry(robot, state)?.iter().enumerate() {
        for (oi, obs) in obstacles.iter().enumerate() {
            let prox = proximity(&body.center, body.radius, &obs.position, index, bi, oi)?;
            let SafetyBound::Bound(rhs) = safety_bound(prox.phi, bound) else {
                continue;
            };
            let (map, drift) = match mode {
                BaseMode::Measured { .. } => (
                    &body.joint_jacobian * dt,
                    &body.base_jacobian * &state.twist * dt,
                ),
                BaseMode::Decision => {
                    let mut m = DMatrix::zeros(2, block);
                    m.view_mut((0, 0), (2, 3)).copy_from(&body.base_jacobian);
                    m.view_mut((0, 3), (2, n)).copy_from(&body.joint_jacobian);
                    (m * dt, DVector::zeros(2))
                }
            };
            let local = kinematic_row(&prox, &map, &drift, &obs.velocity, dt, rhs);
            for k in 0..cfg.horizon {
                let mut row = local.clone();
                row.a = DVector::zeros(vars);
                row.a.rows_mut(k * block, block).copy_from(&local.a);
                rows.push((k, row));
            }
        }
    }
    if !rows.is_empty() {
        let g = DMatrix::from_fn(rows.len(), vars, |i, j| rows[i].1.a[j]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|(_, r)| r.rhs * r.dt - r.c));
        qp = qp.with_inequalities(g, h)?;
        if let Some(w) = cfg.slack_weight {
            let all: Vec<usize> = (0..rows.len()).collect();
            qp = qp.add_slack(&all, w)?;
        }
    }
    Ok(FloatingProblem { qp, block, rows })
}

/// Closed-loop run of the floating robot following a base path with a
/// proportional path follower that sets the desired twist.
#[derive(Debug, Clone)]
pub struct FloatingEpisode {
    pub plant: FloatingPlant,
    pub initial: FloatingState,
    pub obstacles: Vec<Obstacle>,
    /// Desired base position per time step.
    pub path: Vec<[f64; 2]>,
    pub q_nominal: DVector<f64>,
    pub steps: usize,
    pub index: SafetyIndex,
    pub bound: SafetyBoundConfig,
    pub mpc: MpcConfig,
    pub base_decision: bool,
    pub follow_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatingLog {
    pub log: EpisodeLog,
    pub poses: Vec<[f64; 3]>,
    /// Base surface to nearest obstacle, per step.
    pub base_dist: Vec<f64>,
}

impl FloatingEpisode {
    fn path_at(&self, t: usize) -> DVector<f64> {
        let p = self.path[t.min(self.path.len() - 1)];
        DVector::from_vec(vec![p[0], p[1]])
    }

    /// Body-frame twist that drives the base toward the path.
    pub fn desired_twist(&self, state: &FloatingState, t: usize) -> DVector<f64> {
        let dt = self.plant.dt;
        let ff = (self.path_at(t + 1) - self.path_at(t)) / dt;
        let mut v = (self.path_at(t + 1) - state.position()) * self.follow_gain + ff;
        let lim = self.plant.robot.twist_limits[0].min(self.plant.robot.twist_limits[1]);
        if v.norm() > lim {
            v *= lim / v.norm();
        }
        let (s, c) = state.pose[2].sin_cos();
        DVector::from_vec(vec![c * v[0] + s * v[1], -s * v[0] + c * v[1], 0.0])
    }
}

pub fn run_floating(model: &KoopmanModel, episode: &FloatingEpisode) -> Result<FloatingLog> {
    if episode.steps == 0 || episode.path.is_empty() {
        return Err(Error::param("floating episode needs steps and a path"));
    }
    episode.bound.validate()?;
    let robot = &episode.plant.robot;
    let n = robot.joint_count();
    let solver = QpSolver::new(episode.mpc.qp);
    let mut state = episode.initial.clone();
    let mut u_prev = DVector::zeros(robot.control_dim());
    let mut out = FloatingLog {
        log: EpisodeLog {
            kind: ControllerKind::Kmpc,
            steps: Vec::with_capacity(episode.steps),
            aborted: None,
        },
        poses: Vec::with_capacity(episode.steps),
        base_dist: Vec::with_capacity(episode.steps),
    };
    for t in 0..episode.steps {
        let twist = episode.desired_twist(&state, t);
        let mut target = DVector::zeros(robot.state_dim());
        target.rows_mut(0, n).copy_from(&episode.q_nominal);
        target[n] = state.pose[2];
        target.rows_mut(n + 1, 3).copy_from(&twist);
        let reference = vec![target.clone(); episode.mpc.horizon];
        let mode = if episode.base_decision {
            BaseMode::Decision
        } else {
            BaseMode::Measured {
                command: twist.clone(),
            }
        };
        let start = Instant::now();
        let prob = match build_floating_kmpc(
            model,
            robot,
            &state,
            &episode.obstacles,
            &episode.index,
            &episode.bound,
            &episode.mpc,
            &reference,
            &mode,
        ) {
            Ok(p) => p,
            Err(e) => {
                out.log.aborted = Some(format!("step {t}: {e}"));
                break;
            }
        };
        let sol = solver.solve(&prob.qp, None)?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let infeasible = sol.counts_as_infeasible();
        let u = match (&sol.solution, infeasible) {
            (Some(y), false) => {
                let mut u = DVector::zeros(robot.control_dim());
                if episode.base_decision {
                    u.copy_from(&y.rows(0, prob.block));
                } else {
                    u.rows_mut(0, 3).copy_from(&twist);
                    u.rows_mut(3, n).copy_from(&y.rows(0, n));
                }
                robot.clamp_control(&u)
            }
            _ => robot.clamp_control(&(&u_prev * 0.5)),
        };
        let next = episode.plant.step(&state, &u)?;
        if next
            .predictive()
            .iter()
            .chain(next.pose.iter())
            .any(|v| !v.is_finite())
        {
            out.log.aborted = Some(format!("step {t}: non-finite plant state"));
            break;
        }
        state = next;
        u_prev = u.clone();
        let bodies = body_geometry(robot, &state)?;
        let spheres: Vec<_> = bodies
            .iter()
            .map(|b| crate::kinematics::SphereGeometry {
                center: b.center.clone(),
                radius: b.radius,
                jacobian: b.joint_jacobian.clone(),
            })
            .collect();
        let (link_phi, min_dist) = clearance(&spheres, &episode.obstacles, episode.index.d_min);
        let base = spheres.len() - 1;
        let (_, base_min) = clearance(&spheres[base..], &episode.obstacles, episode.index.d_min);
        let x = state.predictive();
        let cost = x
            .iter()
            .zip(target.iter())
            .zip(&episode.mpc.state_weights)
            .map(|((x, r), q)| q * (x - r) * (x - r))
            .sum();
        let goal = episode.path_at(t + 1);
        let pos = state.position();
        out.log.steps.push(ControllerStep {
            t,
            status: sol.status,
            infeasible,
            solve_ms,
            cost,
            max_phi: link_phi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_phi: link_phi.iter().sum::<f64>() / link_phi.len() as f64,
            link_phi,
            min_dist,
            u,
            slack_total: if infeasible { 0.0 } else { sol.slack_total() },
            target_dist: (&pos - &goal).norm(),
            tip: pos,
            target: goal,
        });
        out.poses.push(state.pose);
        out.base_dist.push(base_min);
    }
    Ok(out)
}
