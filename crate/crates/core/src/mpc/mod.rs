//! Condensed model-predictive controllers over the lifted model and the
//! analytic baselines, plus the closed-loop runner.

mod baseline;
mod closed_loop;
mod condense;
mod kmpc;
mod shooting;

pub use baseline::{build_lti, build_ltv, jacobian_model, safety_filter, FilterOutcome};
pub use closed_loop::{
    run_controller, ControllerKind, ControllerSpec, ControllerStep, Episode, EpisodeLog,
    ObstacleMotion, StepStatus,
};
pub use condense::{rollout_cost, tracking_qp, Condensed};
pub use kmpc::{build_kmpc, horizon_rows, MpcProblem, RowTag, SafetyContext};
pub use shooting::{
    shooting_nmpc, shooting_plan, ArmShooting, CemConfig, ShootingProblem, ShootingResult,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::QpSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of Q over the predicted state.
    pub state_weights: Vec<f64>,
    /// Diagonal of Q_N.
    pub terminal_weights: Vec<f64>,
    /// Diagonal of R.
    pub control_weights: Vec<f64>,
    /// Quadratic penalty on safety-row slack; `None` keeps rows hard.
    pub slack_weight: Option<f64>,
    pub qp: QpSettings,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 9,
            state_weights: Vec::new(),
            terminal_weights: Vec::new(),
            control_weights: Vec::new(),
            slack_weight: None,
            qp: QpSettings::default(),
        }
    }
}

impl MpcConfig {
    /// Tip tracking on an arm state `[p; q]`: weight `tip` on the workspace
    /// block, `joint` on the joint block, `control` on every input.
    pub fn tip_tracking(
        workspace_dim: usize,
        joints: usize,
        tip: f64,
        joint: f64,
        control: f64,
    ) -> Self {
        let mut w = vec![tip; workspace_dim];
        w.extend(std::iter::repeat_n(joint, joints));
        Self {
            state_weights: w.clone(),
            terminal_weights: w,
            control_weights: vec![control; joints],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("horizon must be at least 1"));
        }
        let all = self
            .state_weights
            .iter()
            .chain(&self.terminal_weights)
            .chain(&self.control_weights);
        if all.clone().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("cost weights must be non-negative"));
        }
        if self.control_weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::param("control weights must be positive"));
        }
        if let Some(s) = self.slack_weight {
            if !(s > 0.0) {
                return Err(Error::param("slack weight must be positive"));
            }
        }
        Ok(())
    }
}
