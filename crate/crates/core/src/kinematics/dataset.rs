use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Plant, PlantState, SerialChain};
use crate::error::{Error, Result};

/// Random excitation holds each control sample for this many steps.
pub const CONTROL_HOLD_STEPS: usize = 5;

/// One recorded rollout: `states[k]` is `x_k = [p; q]`, `controls[k]` the
/// command applied between `x_k` and `x_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub chain: SerialChain,
    pub dt: f64,
    pub lag: f64,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dt: f64,
    lag: f64,
    seed: u64,
    trajectories: usize,
    chain: SerialChain,
}

const MANIFEST: &str = "manifest.toml";

/// Rollouts of `plant` from start angles uniform in `[-π, π]ⁿ` under
/// piecewise-constant controls uniform within the velocity limits.
pub fn sample_dataset(plant: &Plant, count: usize, horizon: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || horizon == 0 {
        return Err(Error::param("dataset count and horizon must be at least 1"));
    }
    let chain = &plant.chain;
    let n = chain.joint_count();
    let (lo, hi) = (chain.u_min(), chain.u_max());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(count);
    for _ in 0..count {
        let q0 = DVector::from_fn(n, |_, _| {
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        let mut state = PlantState::at_rest(chain, q0)?;
        let mut states = vec![state.to_vector()];
        let mut controls = Vec::with_capacity(horizon);
        let mut u = DVector::zeros(n);
        for k in 0..horizon {
            if k % CONTROL_HOLD_STEPS == 0 {
                u = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..hi[i]));
            }
            state = plant.step(&state, &u)?;
            states.push(state.to_vector());
            controls.push(u.clone());
        }
        trajectories.push(Trajectory { states, controls });
    }
    Ok(Dataset {
        chain: chain.clone(),
        dt: plant.dt,
        lag: plant.lag,
        seed,
        trajectories,
    })
}

impl Dataset {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Writes `manifest.toml` plus one `traj_NNNN.csv` per trajectory with
    /// columns `t, q_1..q_n, u_1..u_n, p_1..p_w`. The final row of each
    /// trajectory has empty control cells.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: "koopsafe-dataset-v1".into(),
            dt: self.dt,
            lag: self.lag,
            seed: self.seed,
            trajectories: self.trajectories.len(),
            chain: self.chain.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format {
            path: dir.join(MANIFEST).display().to_string(),
            detail: e.to_string(),
        })?;
        fs::write(dir.join(MANIFEST), text)?;

        let n = self.chain.joint_count();
        let w = self.chain.workspace_dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q_{i}")));
        header.extend((1..=n).map(|i| format!("u_{i}")));
        header.extend((1..=w).map(|i| format!("p_{i}")));
        for (idx, traj) in self.trajectories.iter().enumerate() {
            let mut wtr = csv::Writer::from_path(dir.join(format!("traj_{idx:04}.csv")))?;
            wtr.write_record(&header)?;
            for (k, x) in traj.states.iter().enumerate() {
                let mut row = vec![format!("{}", k as f64 * self.dt)];
                row.extend(x.rows(w, n).iter().map(|v| v.to_string()));
                match traj.controls.get(k) {
                    Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                    None => row.extend((0..n).map(|_| String::new())),
                }
                row.extend(x.rows(0, w).iter().map(|v| v.to_string()));
                wtr.write_record(&row)?;
            }
            wtr.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let format_err = |detail: String| Error::Format {
            path: manifest_path.display().to_string(),
            detail,
        };
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| format_err(e.to_string()))?;
        if manifest.format != "koopsafe-dataset-v1" {
            return Err(format_err(format!(
                "unknown format tag {}",
                manifest.format
            )));
        }
        let chain = manifest.chain;
        let n = chain.joint_count();
        let w = chain.workspace_dim();
        let mut trajectories = Vec::with_capacity(manifest.trajectories);
        for idx in 0..manifest.trajectories {
            let path = dir.join(format!("traj_{idx:04}.csv"));
            let bad = |detail: String| Error::Format {
                path: path.display().to_string(),
                detail,
            };
            let mut rdr = csv::Reader::from_path(&path)?;
            let mut states = Vec::new();
            let mut controls = Vec::new();
            for record in rdr.records() {
                let record = record?;
                if record.len() != 1 + 2 * n + w {
                    return Err(bad(format!("row has {} fields", record.len())));
                }
                let num = |i: usize| -> Result<f64> {
                    record[i]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("field {i}: {e}")))
                };
                let mut x = DVector::zeros(w + n);
                for j in 0..n {
                    x[w + j] = num(1 + j)?;
                }
                for j in 0..w {
                    x[j] = num(1 + 2 * n + j)?;
                }
                states.push(x);
                if !record[1 + n].is_empty() {
                    controls.push(DVector::from_iterator(
                        n,
                        (0..n).map(|j| num(1 + n + j)).collect::<Result<Vec<_>>>()?,
                    ));
                }
            }
            if states.len() != controls.len() + 1 {
                return Err(bad("expected exactly one more state than controls".into()));
            }
            trajectories.push(Trajectory { states, controls });
        }
        Ok(Self {
            chain,
            dt: manifest.dt,
            lag: manifest.lag,
            seed: manifest.seed,
            trajectories,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::JointLayout;

    fn plant(lag: f64) -> Plant {
        let chain = SerialChain::symmetric(
            JointLayout::PlanarZ,
            vec![0.5, 0.4, 0.3],
            vec![0.05; 3],
            1.0,
        )
        .unwrap();
        Plant::new(chain, 0.05, lag).unwrap()
    }

    /// Replays a trajectory through the plant, reconstructing the hidden
    /// actuator state from zero.
    fn replay(plant: &Plant, traj: &Trajectory) {
        let n = plant.chain.joint_count();
        let w = plant.chain.workspace_dim();
        let mut state =
            PlantState::at_rest(&plant.chain, traj.states[0].rows(w, n).into_owned()).unwrap();
        for (k, u) in traj.controls.iter().enumerate() {
            state = plant.step(&state, u).unwrap();
            assert_eq!(state.to_vector(), traj.states[k + 1]);
        }
    }

    #[test]
    fn single_transition_is_one_plant_step() {
        let p = plant(1.0);
        let ds = sample_dataset(&p, 1, 1, 5).unwrap();
        assert_eq!(ds.transition_count(), 1);
        replay(&p, &ds.trajectories[0]);
    }

    #[test]
    fn reproducible_and_replayable() {
        let p = plant(0.7);
        let a = sample_dataset(&p, 4, 23, 9).unwrap();
        let b = sample_dataset(&p, 4, 23, 9).unwrap();
        assert_eq!(a, b);
        for t in &a.trajectories {
            replay(&p, t);
            for u in &t.controls {
                assert!(u.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn control_marginals_are_uniform() {
        let p = plant(0.7);
        // 2000 trajectories of 25 steps: 10^4 independent draws per joint.
        let ds = sample_dataset(&p, 2000, 25, 1).unwrap();
        for j in 0..3 {
            let mut draws: Vec<f64> = ds
                .trajectories
                .iter()
                .flat_map(|t| {
                    t.controls
                        .iter()
                        .step_by(CONTROL_HOLD_STEPS)
                        .map(move |u| u[j])
                })
                .collect();
            assert_eq!(draws.len(), 10_000);
            draws.sort_by(f64::total_cmp);
            let m = draws.len() as f64;
            let ks = draws
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let cdf = (v + 1.0) / 2.0;
                    (cdf - i as f64 / m)
                        .abs()
                        .max(((i + 1) as f64 / m - cdf).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.05, "KS statistic {ks}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = plant(0.7);
        let ds = sample_dataset(&p, 3, 7, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
    }
}
