use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{JointLayout, SerialChain, Trajectory, CONTROL_HOLD_STEPS};
use crate::safety::{
    kinematic_row, proximity, safety_bound, Obstacle, PhiDotRow, SafetyBound, SafetyBoundConfig,
    SafetyIndex,
};

/// Holonomic planar base carrying a planar arm mounted at the base centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatingRobot {
    pub arm: SerialChain,
    pub base_radius: f64,
    /// Symmetric limits on the body-frame twist `(v_x, v_y, ω)`.
    pub twist_limits: [f64; 3],
}

impl FloatingRobot {
    pub fn new(arm: SerialChain, base_radius: f64, twist_limits: [f64; 3]) -> Result<Self> {
        if arm.layout() != JointLayout::PlanarZ {
            return Err(Error::param("the floating base carries a planar arm"));
        }
        if !(base_radius > 0.0) || twist_limits.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::param(
                "base radius and twist limits must be positive",
            ));
        }
        Ok(Self {
            arm,
            base_radius,
            twist_limits,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.arm.joint_count()
    }

    /// Inputs `[twist command; joint velocities]`.
    pub fn control_dim(&self) -> usize {
        3 + self.joint_count()
    }

    /// Predictive state `[q; θ; twist]`.
    pub fn state_dim(&self) -> usize {
        self.joint_count() + 4
    }

    /// Arm spheres first, then the base.
    pub fn body_count(&self) -> usize {
        self.arm.sphere_count() + 1
    }

    pub fn u_min(&self) -> DVector<f64> {
        let mut u = DVector::zeros(self.control_dim());
        for i in 0..3 {
            u[i] = -self.twist_limits[i];
        }
        u.rows_mut(3, self.joint_count())
            .copy_from(&self.arm.u_min());
        u
    }

    pub fn u_max(&self) -> DVector<f64> {
        -self.u_min()
    }

    pub fn clamp_control(&self, u: &DVector<f64>) -> DVector<f64> {
        let (lo, hi) = (self.u_min(), self.u_max());
        DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
    }
}

/// Ground-truth state. The pose is simulation-only; the predictive state
/// leaves out the global position.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatingState {
    pub q: DVector<f64>,
    /// `(x, y, θ)` in the world frame.
    pub pose: [f64; 3],
    /// Measured body-frame twist.
    pub twist: DVector<f64>,
}

impl FloatingState {
    pub fn at_rest(robot: &FloatingRobot, q: DVector<f64>, pose: [f64; 3]) -> Result<Self> {
        if q.len() != robot.joint_count() {
            return Err(Error::dims("floating joints", robot.joint_count(), q.len()));
        }
        Ok(Self {
            q,
            pose,
            twist: DVector::zeros(3),
        })
    }

    pub fn predictive(&self) -> DVector<f64> {
        let n = self.q.len();
        let mut x = DVector::zeros(n + 4);
        x.rows_mut(0, n).copy_from(&self.q);
        x[n] = self.pose[2];
        x.rows_mut(n + 1, 3).copy_from(&self.twist);
        x
    }

    pub fn position(&self) -> DVector<f64> {
        DVector::from_vec(vec![self.pose[0], self.pose[1]])
    }
}

/// Kinematic plant: the twist follows its command through a first-order
/// lag, then pose and joints integrate.
#[derive(Debug, Clone)]
pub struct FloatingPlant {
    pub robot: FloatingRobot,
    pub dt: f64,
    pub lag: f64,
}

impl FloatingPlant {
    pub fn new(robot: FloatingRobot, dt: f64, lag: f64) -> Result<Self> {
        if !(dt > 0.0) || !(lag > 0.0 && lag <= 1.0) {
            return Err(Error::param("dt must be positive and the lag in (0, 1]"));
        }
        Ok(Self { robot, dt, lag })
    }

    pub fn step(&self, state: &FloatingState, u: &DVector<f64>) -> Result<FloatingState> {
        if u.len() != self.robot.control_dim() {
            return Err(Error::dims(
                "floating control",
                self.robot.control_dim(),
                u.len(),
            ));
        }
        let u = self.robot.clamp_control(u);
        let n = self.robot.joint_count();
        let twist = &state.twist * (1.0 - self.lag) + u.rows(0, 3) * self.lag;
        let [x, y, th] = state.pose;
        let (s, c) = th.sin_cos();
        let pose = [
            x + self.dt * (c * twist[0] - s * twist[1]),
            y + self.dt * (s * twist[0] + c * twist[1]),
            th + self.dt * twist[2],
        ];
        Ok(FloatingState {
            q: &state.q + u.rows(3, n) * self.dt,
            pose,
            twist,
        })
    }
}

/// World-frame data of one collision body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyGeometry {
    pub center: DVector<f64>,
    pub radius: f64,
    /// ∂(centre velocity)/∂(body twist), `2 × 3`.
    pub base_jacobian: DMatrix<f64>,
    /// ∂(centre velocity)/∂q̇, `2 × n`.
    pub joint_jacobian: DMatrix<f64>,
}

fn rotation(th: f64) -> Matrix2<f64> {
    let (s, c) = th.sin_cos();
    Matrix2::new(c, -s, s, c)
}

pub fn body_geometry(robot: &FloatingRobot, state: &FloatingState) -> Result<Vec<BodyGeometry>> {
    let rot = rotation(state.pose[2]);
    let base = Vector2::new(state.pose[0], state.pose[1]);
    let n = robot.joint_count();
    let mut out: Vec<BodyGeometry> = robot
        .arm
        .sphere_geometry(&state.q)?
        .into_iter()
        .map(|s| {
            let local = Vector2::new(s.center[0], s.center[1]);
            let arm = rot * local;
            let world = base + arm;
            let mut jb = DMatrix::zeros(2, 3);
            jb.view_mut((0, 0), (2, 2)).copy_from(&rot);
            jb[(0, 2)] = -arm.y;
            jb[(1, 2)] = arm.x;
            let jq = DMatrix::from_fn(2, n, |r, c| {
                rot[(r, 0)] * s.jacobian[(0, c)] + rot[(r, 1)] * s.jacobian[(1, c)]
            });
            BodyGeometry {
                center: DVector::from_vec(vec![world.x, world.y]),
                radius: s.radius,
                base_jacobian: jb,
                joint_jacobian: jq,
            }
        })
        .collect();
    let mut jb = DMatrix::zeros(2, 3);
    jb.view_mut((0, 0), (2, 2)).copy_from(&rot);
    out.push(BodyGeometry {
        center: DVector::from_vec(vec![base.x, base.y]),
        radius: robot.base_radius,
        base_jacobian: jb,
        joint_jacobian: DMatrix::zeros(2, n),
    });
    Ok(out)
}

/// `J_b v_base + J_q q̇`.
pub fn whole_body_velocity(
    base_jacobian: &DMatrix<f64>,
    twist: &DVector<f64>,
    joint_jacobian: &DMatrix<f64>,
    qdot: &DVector<f64>,
) -> Result<DVector<f64>> {
    if base_jacobian.ncols() != twist.len() || joint_jacobian.ncols() != qdot.len() {
        return Err(Error::dims(
            "whole-body velocity",
            base_jacobian.ncols(),
            twist.len(),
        ));
    }
    if base_jacobian.nrows() != joint_jacobian.nrows() {
        return Err(Error::dims(
            "jacobian rows",
            base_jacobian.nrows(),
            joint_jacobian.nrows(),
        ));
    }
    Ok(base_jacobian * twist + joint_jacobian * qdot)
}

/// Row over the joint velocities with the measured base twist as drift.
#[allow(clippy::too_many_arguments)]
pub fn floating_constraint_row(
    body: &BodyGeometry,
    twist: &DVector<f64>,
    link: usize,
    obstacle: &Obstacle,
    obstacle_index: usize,
    index: &SafetyIndex,
    cfg: &SafetyBoundConfig,
    dt: f64,
) -> Result<Option<PhiDotRow>> {
    let prox = proximity(
        &body.center,
        body.radius,
        &obstacle.position,
        index,
        link,
        obstacle_index,
    )?;
    let SafetyBound::Bound(rhs) = safety_bound(prox.phi, cfg) else {
        return Ok(None);
    };
    let drift = &body.base_jacobian * twist * dt;
    Ok(Some(kinematic_row(
        &prox,
        &(&body.joint_jacobian * dt),
        &drift,
        &obstacle.velocity,
        dt,
        rhs,
    )))
}

/// Rollouts under piecewise-constant random commands, recorded as
/// predictive states.
pub fn sample_floating_dataset(
    plant: &FloatingPlant,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 || horizon == 0 {
        return Err(Error::param("dataset count and horizon must be at least 1"));
    }
    let robot = &plant.robot;
    let n = robot.joint_count();
    let (lo, hi) = (robot.u_min(), robot.u_max());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    (0..count)
        .map(|_| {
            let q0 = DVector::from_fn(n, |_, _| rng.gen_range(-pi..pi));
            let th = rng.gen_range(-pi..pi);
            let mut s = FloatingState::at_rest(robot, q0, [0.0, 0.0, th])?;
            let mut states = vec![s.predictive()];
            let mut controls = Vec::with_capacity(horizon);
            let mut u = DVector::zeros(robot.control_dim());
            for k in 0..horizon {
                if k % CONTROL_HOLD_STEPS == 0 {
                    u = DVector::from_fn(robot.control_dim(), |i, _| rng.gen_range(lo[i]..hi[i]));
                }
                s = plant.step(&s, &u)?;
                states.push(s.predictive());
                controls.push(u.clone());
            }
            Ok(Trajectory { states, controls })
        })
        .collect()
}
