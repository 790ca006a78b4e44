use nalgebra::{DMatrix, DVector};

use super::condense::{tracking_qp, Condensed};
use super::MpcConfig;
use crate::error::{Error, Result};
use crate::kinematics::SerialChain;
use crate::koopnet::KoopmanModel;
use crate::qp::QpProblem;
use crate::safety::{
    kinematic_row, proximity, safety_bound, Obstacle, PhiDotRow, SafetyBound, SafetyBoundConfig,
    SafetyIndex,
};

/// Collision geometry and index used to generate safety rows.
#[derive(Debug, Clone, Copy)]
pub struct SafetyContext<'a> {
    pub chain: &'a SerialChain,
    pub obstacles: &'a [Obstacle],
    pub index: SafetyIndex,
    pub bound: SafetyBoundConfig,
}

/// Origin of one safety inequality in the QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowTag {
    pub link: usize,
    pub obstacle: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: QpProblem,
    pub condensed: Condensed,
    /// One tag per inequality row, all of which are safety rows.
    pub tags: Vec<RowTag>,
    /// Step-0 rows over `u_0` alone, as evaluated at the measured state.
    pub current_rows: Vec<PhiDotRow>,
}

/// Rows `(aᵀU + c)/dt ≤ rhs` for every horizon step of one (sphere,
/// obstacle) pair. `joint_step(k)` returns the predicted joint increment
/// of step `k` as `(map over U, constant)`, and `input_jacobian` maps a
/// joint increment to a sphere displacement. Geometry stays frozen at the
/// measured state.
#[allow(clippy::too_many_arguments)]
pub fn horizon_rows(
    cond: &Condensed,
    joint_offset: usize,
    joints: usize,
    jacobian: &DMatrix<f64>,
    obstacle: &Obstacle,
    prox: &crate::safety::Proximity,
    rhs: f64,
    dt: f64,
) -> Vec<PhiDotRow> {
    (0..cond.horizon())
        .map(|k| {
            let dmap = cond.maps[k + 1].rows(joint_offset, joints)
                - cond.maps[k].rows(joint_offset, joints);
            let dfree = cond.free[k + 1].rows(joint_offset, joints)
                - cond.free[k].rows(joint_offset, joints);
            kinematic_row(
                prox,
                &(jacobian * dmap),
                &(jacobian * dfree),
                &obstacle.velocity,
                dt,
                rhs,
            )
        })
        .collect()
}

/// Stacks rows into `G U ≤ h` with `h = rhs·dt - c`.
pub(crate) fn stack_rows(rows: &[PhiDotRow], vars: usize) -> (DMatrix<f64>, DVector<f64>) {
    let g = DMatrix::from_fn(rows.len(), vars, |i, j| rows[i].a[j]);
    let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.rhs * r.dt - r.c));
    (g, h)
}

/// Condensed lifted-model MPC with linkwise safety rows on every step.
/// `reference[k]` is the target of the state predicted `k + 1` steps ahead.
pub fn build_kmpc(
    model: &KoopmanModel,
    safety: &SafetyContext<'_>,
    x0: &DVector<f64>,
    reference: &[DVector<f64>],
    cfg: &MpcConfig,
) -> Result<MpcProblem> {
    cfg.validate()?;
    let chain = safety.chain;
    if model.control_dim() != chain.joint_count() || model.layout.joint_count != chain.joint_count()
    {
        return Err(Error::dims(
            "model controls",
            chain.joint_count(),
            model.control_dim(),
        ));
    }
    let z0 = model.lift(x0)?;
    let nx = model.state_dim();
    let cond = Condensed::new(&model.a, &model.b, &z0, nx, cfg.horizon)?;
    let mut qp = tracking_qp(&cond, cfg, reference, &chain.u_min(), &chain.u_max())?;
    let off = model.layout.joint_offset;
    let n = chain.joint_count();
    let q = x0.rows(off, n).into_owned();
    let spheres = chain.sphere_geometry(&q)?;
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    let mut current_rows = Vec::new();
    for (link, sphere) in spheres.iter().enumerate() {
        for (oi, obs) in safety.obstacles.iter().enumerate() {
            let prox = proximity(
                &sphere.center,
                sphere.radius,
                &obs.position,
                &safety.index,
                link,
                oi,
            )?;
            let SafetyBound::Bound(rhs) = safety_bound(prox.phi, &safety.bound) else {
                continue;
            };
            let step_rows =
                horizon_rows(&cond, off, n, &sphere.jacobian, obs, &prox, rhs, model.dt);
            let first = &step_rows[0];
            let mut now = first.clone();
            now.a = first.a.rows(0, n).into_owned();
            current_rows.push(now);
            for (k, r) in step_rows.into_iter().enumerate() {
                tags.push(RowTag {
                    link,
                    obstacle: oi,
                    step: k,
                });
                rows.push(r);
            }
        }
    }
    if !rows.is_empty() {
        let (g, h) = stack_rows(&rows, cond.decision_dim());
        qp = qp.with_inequalities(g, h)?;
        if let Some(w) = cfg.slack_weight {
            let all: Vec<usize> = (0..rows.len()).collect();
            qp = qp.add_slack(&all, w)?;
        }
    }
    Ok(MpcProblem {
        qp,
        condensed: cond,
        tags,
        current_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{JointLayout, PlantState};
    use crate::koopnet::ModelSpec;
    use crate::mpc::build_ltv;
    use crate::qp::{QpSolver, QpStatus};
    use crate::safety::phidot_row;

    fn chain() -> SerialChain {
        SerialChain::symmetric(
            JointLayout::PlanarZ,
            vec![0.5, 0.4, 0.3],
            vec![0.05; 3],
            1.0,
        )
        .unwrap()
    }

    fn integrator_model(chain: &SerialChain, q_lin: &DVector<f64>) -> KoopmanModel {
        let mut spec = ModelSpec::for_arm(chain, 0.05, 1);
        spec.hidden = vec![4];
        spec.latent = 2;
        let mut model = KoopmanModel::new(&spec).unwrap();
        // Tip rows follow the Jacobian at the linearisation point.
        let jt = chain
            .position_jacobian(q_lin, chain.sphere_count() - 1)
            .unwrap();
        model.b.view_mut((0, 0), (2, 3)).copy_from(&(jt * 0.05));
        model
    }

    fn reference(n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|k| DVector::from_vec(vec![0.6 + 0.01 * k as f64, 0.5, 0.0, 0.0, 0.0]))
            .collect()
    }

    #[test]
    fn drift_free_model_reproduces_ltv() {
        let chain = chain();
        let q = DVector::from_vec(vec![0.2, 0.4, -0.3]);
        let x0 = PlantState::at_rest(&chain, q.clone()).unwrap().to_vector();
        let model = integrator_model(&chain, &q);
        let cfg = MpcConfig::tip_tracking(2, 3, 10.0, 0.0, 0.01);
        let safety = SafetyContext {
            chain: &chain,
            obstacles: &[],
            index: SafetyIndex::signed_distance(0.2).unwrap(),
            bound: SafetyBoundConfig::default(),
        };
        let r = reference(9);
        let k = build_kmpc(&model, &safety, &x0, &r, &cfg).unwrap();
        let l = build_ltv(&chain, &x0, &r, &cfg, 0.05).unwrap();
        assert!((&k.qp.hessian - &l.hessian).amax() < 1e-10);
        assert!((&k.qp.linear - &l.linear).amax() < 1e-10);
        let solver = QpSolver::default();
        let uk = solver.solve(&k.qp, None).unwrap().solution.unwrap();
        let ul = solver.solve(&l, None).unwrap().solution.unwrap();
        assert!((uk.rows(0, 3) - ul.rows(0, 3)).amax() < 1e-6);
    }

    #[test]
    fn first_step_rows_match_phidot_row_and_are_affine() {
        let chain = chain();
        let q = DVector::from_vec(vec![0.3, 0.5, 0.4]);
        let x0 = PlantState::at_rest(&chain, q.clone()).unwrap().to_vector();
        let mut spec = ModelSpec::for_arm(&chain, 0.05, 4);
        spec.hidden = vec![6];
        spec.latent = 3;
        let mut model = KoopmanModel::new(&spec).unwrap();
        model.a[(3, 6)] = 0.02;
        model.a[(4, 5)] = -0.03;
        let obstacles = [Obstacle {
            position: DVector::from_vec(vec![0.55, 0.45]),
            velocity: DVector::from_vec(vec![-0.1, 0.0]),
        }];
        let safety = SafetyContext {
            chain: &chain,
            obstacles: &obstacles,
            index: SafetyIndex::new(1.2, 0.05, 0.2).unwrap(),
            bound: SafetyBoundConfig::default(),
        };
        let cfg = MpcConfig::tip_tracking(2, 3, 10.0, 0.0, 0.01);
        let prob = build_kmpc(&model, &safety, &x0, &reference(9), &cfg).unwrap();
        assert!(!prob.current_rows.is_empty());
        let z = model.lift(&x0).unwrap();
        let spheres = chain.sphere_geometry(&q).unwrap();
        for row in &prob.current_rows {
            let direct = phidot_row(
                &model,
                &z,
                &spheres[row.link],
                row.link,
                &obstacles[0],
                0,
                &safety.index,
                &safety.bound,
            )
            .unwrap()
            .unwrap();
            assert!((&direct.a - &row.a).amax() < 1e-12);
            assert!((direct.c - row.c).abs() < 1e-12);
        }
        assert_eq!(prob.tags.len(), prob.current_rows.len() * 9);
        // Superposition of the stacked rows.
        let g = &prob.qp.ineq;
        let u1 = DVector::from_fn(27, |i, _| (i as f64 * 0.37).sin());
        let u2 = DVector::from_fn(27, |i, _| (i as f64 * 0.11).cos());
        let lhs = g * (&u1 * 1.5 - &u2 * 0.25);
        let rhs = g * &u1 * 1.5 - g * &u2 * 0.25;
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn later_rows_match_predicted_displacement() {
        let chain = chain();
        let q = DVector::from_vec(vec![0.3, 0.5, 0.4]);
        let x0 = PlantState::at_rest(&chain, q.clone()).unwrap().to_vector();
        let mut spec = ModelSpec::for_arm(&chain, 0.05, 5);
        spec.hidden = vec![6];
        spec.latent = 3;
        let mut model = KoopmanModel::new(&spec).unwrap();
        model.a[(2, 5)] = 0.05;
        model.a[(4, 6)] = 0.04;
        let obstacles = [Obstacle::fixed(DVector::from_vec(vec![0.5, 0.5]))];
        let safety = SafetyContext {
            chain: &chain,
            obstacles: &obstacles,
            index: SafetyIndex::signed_distance(0.2).unwrap(),
            bound: SafetyBoundConfig::default(),
        };
        let cfg = MpcConfig::tip_tracking(2, 3, 10.0, 0.0, 0.01);
        let prob = build_kmpc(&model, &safety, &x0, &reference(9), &cfg).unwrap();
        let u = DVector::from_fn(27, |i, _| 0.5 * (i as f64).sin());
        let z0 = model.lift(&x0).unwrap();
        let controls: Vec<_> = (0..9).map(|k| u.rows(3 * k, 3).into_owned()).collect();
        let mut zs = vec![z0.clone()];
        zs.extend(model.rollout(&z0, &controls).unwrap());
        let spheres = chain.sphere_geometry(&q).unwrap();
        for (i, tag) in prob.tags.iter().enumerate() {
            let dq = zs[tag.step + 1].rows(2, 3) - zs[tag.step].rows(2, 3);
            let disp = &spheres[tag.link].jacobian * dq;
            let prox = proximity(
                &spheres[tag.link].center,
                0.05,
                &obstacles[0].position,
                &safety.index,
                tag.link,
                0,
            )
            .unwrap();
            let expected = -prox.slope * prox.unit.dot(&disp);
            let lhs = prob.qp.ineq.row(i).dot(&u.transpose());
            let SafetyBound::Bound(rhs) = safety_bound(prox.phi, &safety.bound) else {
                panic!("tagged row must be active");
            };
            let c = rhs * 0.05 - prob.qp.ineq_rhs[i];
            assert!((lhs + c - expected).abs() < 1e-12, "{}", lhs + c - expected);
        }
        let out = QpSolver::default().solve(&prob.qp, None).unwrap();
        assert_eq!(out.status, QpStatus::Solved);
    }
}
