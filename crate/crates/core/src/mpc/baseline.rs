use nalgebra::{DMatrix, DVector};

use super::condense::{tracking_qp, Condensed};
use super::kmpc::stack_rows;
use super::MpcConfig;
use crate::error::{Error, Result};
use crate::kinematics::SerialChain;
use crate::qp::{QpProblem, QpSolver, QpStatus};
use crate::safety::PhiDotRow;

/// `(A, B)` of the Jacobian model on `[p; q]`: `p' = p + dt·J(q̄)u`,
/// `q' = q + dt·u`.
pub fn jacobian_model(
    chain: &SerialChain,
    q_bar: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = chain.joint_count();
    let w = chain.workspace_dim();
    let jt = chain.position_jacobian(q_bar, chain.sphere_count() - 1)?;
    let mut b = DMatrix::zeros(w + n, n);
    b.view_mut((0, 0), (w, n)).copy_from(&(jt * dt));
    b.view_mut((w, 0), (n, n)).fill_diagonal(dt);
    Ok((DMatrix::identity(w + n, w + n), b))
}

fn linear_arm_qp(
    chain: &SerialChain,
    q_bar: &DVector<f64>,
    x0: &DVector<f64>,
    reference: &[DVector<f64>],
    cfg: &MpcConfig,
    dt: f64,
) -> Result<QpProblem> {
    cfg.validate()?;
    if x0.len() != chain.state_dim() {
        return Err(Error::dims("arm state", chain.state_dim(), x0.len()));
    }
    let (a, b) = jacobian_model(chain, q_bar, dt)?;
    let cond = Condensed::new(&a, &b, x0, x0.len(), cfg.horizon)?;
    tracking_qp(&cond, cfg, reference, &chain.u_min(), &chain.u_max())
}

/// Tracking QP linearised once at the fixed configuration `q_star`.
pub fn build_lti(
    chain: &SerialChain,
    q_star: &DVector<f64>,
    x0: &DVector<f64>,
    reference: &[DVector<f64>],
    cfg: &MpcConfig,
    dt: f64,
) -> Result<QpProblem> {
    linear_arm_qp(chain, q_star, x0, reference, cfg, dt)
}

/// Tracking QP linearised at the measured configuration.
pub fn build_ltv(
    chain: &SerialChain,
    x0: &DVector<f64>,
    reference: &[DVector<f64>],
    cfg: &MpcConfig,
    dt: f64,
) -> Result<QpProblem> {
    let w = chain.workspace_dim();
    if x0.len() != chain.state_dim() {
        return Err(Error::dims("arm state", chain.state_dim(), x0.len()));
    }
    let q = x0.rows(w, chain.joint_count()).into_owned();
    linear_arm_qp(chain, &q, x0, reference, cfg, dt)
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub u: DVector<f64>,
    pub status: QpStatus,
    /// The solve reported an empty feasible set and `u` is the fallback.
    pub infeasible: bool,
    /// `u_ref` already satisfied every row and limit.
    pub passthrough: bool,
    pub slack_total: f64,
}

/// Closest control to `u_ref` within the box that satisfies every row.
/// An infeasible solve returns `fallback` clamped to the box.
pub fn safety_filter(
    u_ref: &DVector<f64>,
    rows: &[PhiDotRow],
    u_min: &DVector<f64>,
    u_max: &DVector<f64>,
    slack_weight: Option<f64>,
    solver: &QpSolver,
    fallback: &DVector<f64>,
) -> Result<FilterOutcome> {
    let m = u_ref.len();
    if u_min.len() != m || u_max.len() != m || fallback.len() != m {
        return Err(Error::dims("filter limits", m, u_min.len()));
    }
    if let Some(r) = rows.iter().find(|r| r.a.len() != m) {
        return Err(Error::dims("filter row", m, r.a.len()));
    }
    let inside = (0..m).all(|i| u_ref[i] >= u_min[i] && u_ref[i] <= u_max[i]);
    if inside && rows.iter().all(|r| r.violation(u_ref) <= 0.0) {
        return Ok(FilterOutcome {
            u: u_ref.clone(),
            status: QpStatus::Solved,
            infeasible: false,
            passthrough: true,
            slack_total: 0.0,
        });
    }
    let mut qp = QpProblem::new(DMatrix::identity(m, m) * 2.0, u_ref * -2.0)?
        .with_bounds(u_min.clone(), u_max.clone())?;
    qp.offset = u_ref.norm_squared();
    if !rows.is_empty() {
        let (g, h) = stack_rows(rows, m);
        qp = qp.with_inequalities(g, h)?;
        if let Some(w) = slack_weight {
            let all: Vec<usize> = (0..rows.len()).collect();
            qp = qp.add_slack(&all, w)?;
        }
    }
    let out = solver.solve(&qp, None)?;
    let clamp = |v: &DVector<f64>| DVector::from_fn(m, |i, _| v[i].clamp(u_min[i], u_max[i]));
    match (&out.solution, out.counts_as_infeasible()) {
        (Some(y), false) => Ok(FilterOutcome {
            u: clamp(&y.rows(0, m).into_owned()),
            status: out.status,
            infeasible: false,
            passthrough: false,
            slack_total: out.slack_total(),
        }),
        _ => Ok(FilterOutcome {
            u: clamp(fallback),
            status: out.status,
            infeasible: out.counts_as_infeasible(),
            passthrough: false,
            slack_total: 0.0,
        }),
    }
}
