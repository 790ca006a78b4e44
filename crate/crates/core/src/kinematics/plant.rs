use nalgebra::DVector;

use super::SerialChain;
use crate::error::{Error, Result};

/// Measured state of the velocity-controlled arm.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: DVector<f64>,
    /// Tip position, always the forward-kinematics image of `q`.
    pub p: DVector<f64>,
    /// Effective joint velocity applied during the previous step.
    pub u_prev: DVector<f64>,
}

impl PlantState {
    pub fn at_rest(chain: &SerialChain, q: DVector<f64>) -> Result<Self> {
        let p = chain.tip(&q)?;
        let n = chain.joint_count();
        Ok(Self {
            q,
            p,
            u_prev: DVector::zeros(n),
        })
    }

    /// The model state `x = [p; q]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.p.len() + self.q.len());
        x.rows_mut(0, self.p.len()).copy_from(&self.p);
        x.rows_mut(self.p.len(), self.q.len()).copy_from(&self.q);
        x
    }
}

/// Ground-truth plant: joint-velocity commands pass through a first-order
/// actuator lag, `u_eff = (1 - lag) u_prev + lag u`, then integrate.
#[derive(Debug, Clone)]
pub struct Plant {
    pub chain: SerialChain,
    pub dt: f64,
    pub lag: f64,
}

impl Plant {
    pub fn new(chain: SerialChain, dt: f64, lag: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::param(format!("dt must be positive, got {dt}")));
        }
        if !(lag > 0.0 && lag <= 1.0) {
            return Err(Error::param(format!(
                "actuator lag must lie in (0, 1], got {lag}"
            )));
        }
        Ok(Self { chain, dt, lag })
    }

    pub fn step(&self, state: &PlantState, u: &DVector<f64>) -> Result<PlantState> {
        let n = self.chain.joint_count();
        if u.len() != n {
            return Err(Error::dims("plant control", n, u.len()));
        }
        let u = self.chain.clamp_control(u);
        let u_eff = if self.lag == 1.0 {
            u
        } else {
            &state.u_prev * (1.0 - self.lag) + u * self.lag
        };
        let q = &state.q + &u_eff * self.dt;
        let p = self.chain.tip(&q)?;
        Ok(PlantState {
            q,
            p,
            u_prev: u_eff,
        })
    }
}
