//! Dense convex quadratic programs
//!
//! ```text
//! minimise   ½ yᵀ H y + gᵀ y + offset
//! subject to G y ≤ h,  lb ≤ y ≤ ub
//! ```
//!
//! solved by an operator-splitting iteration with an active-set polish.

mod admm;
mod dump;

pub use admm::{QpSettings, QpSolver};
pub use dump::{read_dump, write_dump};

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A row that was relaxed by [`QpProblem::add_slack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlackColumn {
    pub row: usize,
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Constant added to the reported objective.
    pub offset: f64,
    pub ineq: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub slack: Vec<SlackColumn>,
}

impl QpProblem {
    /// Unconstrained problem over `vars` variables with infinite bounds.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let v = linear.len();
        let p = Self {
            hessian,
            linear,
            offset: 0.0,
            ineq: DMatrix::zeros(0, v),
            ineq_rhs: DVector::zeros(0),
            lb: DVector::from_element(v, f64::NEG_INFINITY),
            ub: DVector::from_element(v, f64::INFINITY),
            slack: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self> {
        self.lb = lb;
        self.ub = ub;
        self.validate()?;
        Ok(self)
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        self.ineq = g;
        self.ineq_rhs = h;
        self.validate()?;
        Ok(self)
    }

    pub fn var_count(&self) -> usize {
        self.linear.len()
    }

    pub fn row_count(&self) -> usize {
        self.ineq.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.var_count();
        if self.hessian.shape() != (v, v) {
            return Err(Error::dims("hessian", v, self.hessian.nrows()));
        }
        if self.ineq.ncols() != v {
            return Err(Error::dims("inequality columns", v, self.ineq.ncols()));
        }
        if self.ineq_rhs.len() != self.ineq.nrows() {
            return Err(Error::dims(
                "inequality rhs",
                self.ineq.nrows(),
                self.ineq_rhs.len(),
            ));
        }
        if self.lb.len() != v || self.ub.len() != v {
            return Err(Error::dims("bounds", v, self.lb.len().min(self.ub.len())));
        }
        let scale = self.hessian.amax().max(1.0);
        if (&self.hessian - self.hessian.transpose()).amax() > 1e-10 * scale {
            return Err(Error::param("hessian is not symmetric"));
        }
        if self.lb.iter().zip(self.ub.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::param("lower bound exceeds upper bound"));
        }
        if self
            .hessian
            .iter()
            .chain(self.linear.iter())
            .chain(self.ineq.iter())
            .any(|x| !x.is_finite())
            || self.ineq_rhs.iter().any(|x| x.is_nan())
        {
            return Err(Error::param("problem data must be finite"));
        }
        Ok(())
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.hessian * y)) + self.linear.dot(y) + self.offset
    }

    /// Largest violation of any inequality or bound at `y`.
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        let rows = (&self.ineq * y - &self.ineq_rhs).fold(0.0f64, |m, r| m.max(r));
        let bounds = y
            .iter()
            .zip(self.lb.iter().zip(self.ub.iter()))
            .fold(0.0f64, |m, (x, (l, u))| m.max(l - x).max(x - u));
        rows.max(bounds)
    }

    /// Relaxes `rows` to `G_i y - s_i ≤ h_i`, `s_i ≥ 0`, adding `weight · s_i²`
    /// to the objective. Slack columns are appended in the order given.
    pub fn add_slack(&self, rows: &[usize], weight: f64) -> Result<Self> {
        if rows.is_empty() {
            return Ok(self.clone());
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::param("slack weight must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &r in rows {
            if r >= self.row_count() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.row_count(),
                });
            }
            if !seen.insert(r) || self.slack.iter().any(|s| s.row == r) {
                return Err(Error::param(format!("row {r} is relaxed twice")));
            }
        }
        let v = self.var_count();
        let k = rows.len();
        let mut hessian = DMatrix::zeros(v + k, v + k);
        hessian.view_mut((0, 0), (v, v)).copy_from(&self.hessian);
        let mut ineq = DMatrix::zeros(self.row_count(), v + k);
        ineq.view_mut((0, 0), (self.row_count(), v))
            .copy_from(&self.ineq);
        let mut slack = self.slack.clone();
        for (j, &r) in rows.iter().enumerate() {
            hessian[(v + j, v + j)] = 2.0 * weight;
            ineq[(r, v + j)] = -1.0;
            slack.push(SlackColumn {
                row: r,
                column: v + j,
            });
        }
        let mut linear = DVector::zeros(v + k);
        linear.rows_mut(0, v).copy_from(&self.linear);
        let mut lb = DVector::zeros(v + k);
        lb.rows_mut(0, v).copy_from(&self.lb);
        let mut ub = DVector::from_element(v + k, f64::INFINITY);
        ub.rows_mut(0, v).copy_from(&self.ub);
        Ok(Self {
            hessian,
            linear,
            offset: self.offset,
            ineq,
            ineq_rhs: self.ineq_rhs.clone(),
            lb,
            ub,
            slack,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    PrimalInfeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::PrimalInfeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

/// Farkas direction over the one-sided constraint list
/// `[G y ≤ h; y ≤ ub; -y ≤ -lb]` (infinite bounds omitted): `ξ ≥ 0`,
/// `Aᵀξ ≈ 0`, `bᵀξ < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub rows: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl Certificate {
    /// `(‖Aᵀξ‖∞, bᵀξ, ‖ξ‖∞, min ξ)` against `problem`.
    pub fn residuals(&self, problem: &QpProblem) -> (f64, f64, f64, f64) {
        let xi_rows = DVector::from_column_slice(&self.rows);
        let mut at_xi = problem.ineq.tr_mul(&xi_rows);
        let mut b_xi = 0.0;
        for (i, &x) in self.rows.iter().enumerate() {
            if x != 0.0 {
                b_xi += x * problem.ineq_rhs[i];
            }
        }
        for j in 0..problem.var_count() {
            if self.upper[j] != 0.0 {
                at_xi[j] += self.upper[j];
                b_xi += self.upper[j] * problem.ub[j];
            }
            if self.lower[j] != 0.0 {
                at_xi[j] -= self.lower[j];
                b_xi -= self.lower[j] * problem.lb[j];
            }
        }
        let all = self.rows.iter().chain(&self.upper).chain(&self.lower);
        let norm = all.clone().fold(0.0f64, |m, x| m.max(x.abs()));
        let min = all.fold(f64::INFINITY, |m, &x| m.min(x));
        (at_xi.amax(), b_xi, norm, min)
    }

    pub fn verify(&self, problem: &QpProblem) -> bool {
        let (at_xi, b_xi, norm, min) = self.residuals(problem);
        norm > 0.0 && min >= 0.0 && at_xi <= 1e-6 * norm && b_xi <= -1e-8
    }
}

#[derive(Debug, Clone)]
pub struct QpOutcome {
    pub status: QpStatus,
    pub solution: Option<DVector<f64>>,
    pub objective: f64,
    /// Slack value of each relaxed row, in `problem.slack` order.
    pub slack_usage: Vec<f64>,
    pub certificate: Option<Certificate>,
    /// At `MaxIter`: whether the infeasibility test fires at 10× looser tolerance.
    pub loose_infeasible: bool,
    pub iterations: usize,
    pub polished: bool,
    pub solve_time: Duration,
}

impl QpOutcome {
    /// Whether this solve counts as infeasible in infeasibility statistics.
    pub fn counts_as_infeasible(&self) -> bool {
        match self.status {
            QpStatus::Solved => false,
            QpStatus::PrimalInfeasible => true,
            QpStatus::MaxIter => self.loose_infeasible,
        }
    }

    pub fn slack_total(&self) -> f64 {
        self.slack_usage.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(h: f64, g: f64) -> QpProblem {
        QpProblem::new(DMatrix::from_element(1, 1, h), DVector::from_element(1, g)).unwrap()
    }

    #[test]
    fn add_slack_structure() {
        let p = scalar(2.0, 0.0)
            .with_inequalities(
                DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
                DVector::from_vec(vec![-1.0, -1.0]),
            )
            .unwrap();
        assert_eq!(p.add_slack(&[], 1.0).unwrap(), p);
        let s = p.add_slack(&[1], 5.0).unwrap();
        assert_eq!(s.var_count(), 2);
        assert_eq!(s.hessian[(1, 1)], 10.0);
        assert_eq!(s.ineq[(1, 1)], -1.0);
        assert_eq!(s.ineq[(0, 1)], 0.0);
        assert_eq!(s.lb[1], 0.0);
        assert_eq!(s.slack, vec![SlackColumn { row: 1, column: 1 }]);
        assert!(p.add_slack(&[1, 1], 1.0).is_err());
        assert!(s.add_slack(&[1], 1.0).is_err());
        assert!(p.add_slack(&[2], 1.0).is_err());
    }

    #[test]
    fn rejects_malformed_problems() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QpProblem::new(asym, DVector::zeros(2)).is_err());
        let p = scalar(1.0, 0.0);
        assert!(p
            .clone()
            .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0))
            .is_err());
        assert!(p
            .with_inequalities(DMatrix::zeros(1, 2), DVector::zeros(1))
            .is_err());
    }
}
