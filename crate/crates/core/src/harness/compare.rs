use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kinematics::{SerialChain, Trajectory};
use crate::koopnet::{windows, KoopmanModel};
use crate::mpc::jacobian_model;

/// Horizons reported by the model comparison.
pub const DEFAULT_HORIZONS: [usize; 5] = [1, 5, 10, 20, 50];

/// Anything that predicts the original state open loop.
pub trait Predictor {
    /// States after each control, `x̂_1 … x̂_K`.
    fn predict(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>;
}

impl Predictor for KoopmanModel {
    fn predict(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let z0 = self.lift(x0)?;
        Ok(self
            .rollout(&z0, controls)?
            .iter()
            .map(|z| self.project(z))
            .collect())
    }
}

/// `x' = A x + B u` on the original state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearPredictor {
    /// Jacobian-linearised arm model about `q_star`.
    pub fn arm_lti(chain: &SerialChain, q_star: &DVector<f64>, dt: f64) -> Result<Self> {
        let (a, b) = jacobian_model(chain, q_star, dt)?;
        Ok(Self { a, b })
    }
}

impl Predictor for LinearPredictor {
    fn predict(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if x0.len() != self.a.nrows() {
            return Err(Error::dims("predictor state", self.a.nrows(), x0.len()));
        }
        let mut x = x0.clone();
        controls
            .iter()
            .map(|u| {
                if u.len() != self.b.ncols() {
                    return Err(Error::dims("predictor control", self.b.ncols(), u.len()));
                }
                x = &self.a * &x + &self.b * u;
                Ok(x.clone())
            })
            .collect()
    }
}

/// Arm model re-linearised at every predicted configuration.
#[derive(Debug, Clone)]
pub struct ArmLtvPredictor {
    pub chain: SerialChain,
    pub dt: f64,
}

impl Predictor for ArmLtvPredictor {
    fn predict(&self, x0: &DVector<f64>, controls: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let w = self.chain.workspace_dim();
        let n = self.chain.joint_count();
        if x0.len() != w + n {
            return Err(Error::dims("predictor state", w + n, x0.len()));
        }
        let mut x = x0.clone();
        controls
            .iter()
            .map(|u| {
                let q = x.rows(w, n).into_owned();
                let (a, b) = jacobian_model(&self.chain, &q, self.dt)?;
                x = a * &x + b * u;
                Ok(x.clone())
            })
            .collect()
    }
}

/// Mean open-loop error `‖x̂_h − x_h‖` per model and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub horizons: Vec<usize>,
    /// `(model name, mean error per horizon)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Mean `h`-step error of `model` over every window of `data`.
pub fn mean_error(model: &dyn Predictor, data: &[Trajectory], horizon: usize) -> Result<f64> {
    let all = windows(data, horizon);
    if all.is_empty() {
        return Err(Error::param(format!(
            "no held-out trajectory has {horizon} transitions"
        )));
    }
    let mut total = 0.0;
    for w in &all {
        let pred = model.predict(&w.states[0], w.controls)?;
        total += (&pred[horizon - 1] - &w.states[horizon]).norm();
    }
    Ok(total / all.len() as f64)
}

pub fn compare_models(
    models: &[(&str, &dyn Predictor)],
    data: &[Trajectory],
    horizons: &[usize],
) -> Result<ErrorTable> {
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::param("horizons must be non-empty and positive"));
    }
    let rows = models
        .iter()
        .map(|(name, m)| {
            let errs = horizons
                .iter()
                .map(|&h| mean_error(*m, data, h))
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), errs))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorTable {
        horizons: horizons.to_vec(),
        rows,
    })
}

impl ErrorTable {
    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.as_slice())
    }

    /// One row per model, one `h_<k>` column per horizon.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["model".to_string()];
        header.extend(self.horizons.iter().map(|h| format!("h_{h}")));
        w.write_record(&header)?;
        for (name, errs) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(errs.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.display().to_string(),
            detail,
        };
        let mut r = csv::Reader::from_path(path)?;
        let horizons = r
            .headers()?
            .iter()
            .skip(1)
            .map(|h| {
                h.strip_prefix("h_")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| bad(format!("bad horizon column {h}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let errs = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push((rec[0].to_string(), errs));
        }
        Ok(Self { horizons, rows })
    }
}
