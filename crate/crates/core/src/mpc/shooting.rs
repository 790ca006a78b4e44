use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MpcConfig;
use crate::error::{Error, Result};
use crate::kinematics::{Plant, PlantState};
use crate::safety::Obstacle;

/// A finite-horizon control problem evaluated by simulation.
pub trait ShootingProblem {
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn limits(&self) -> (DVector<f64>, DVector<f64>);
    fn cost(&self, controls: &[DVector<f64>]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub samples: usize,
    pub iterations: usize,
    pub elite_fraction: f64,
    /// Initial sampling deviation as a fraction of each half-range.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            iterations: 3,
            elite_fraction: 0.1,
            init_std: 0.5,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.iterations == 0 {
            return Err(Error::param(
                "shooting needs at least one sample and one iteration",
            ));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::param("elite fraction must lie in (0, 1]"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::param("sampling deviation must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShootingResult {
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
    pub evaluations: usize,
}

fn sub_seed(seed: u64, iteration: usize, sample: usize) -> u64 {
    // splitmix64 finaliser over the packed triple.
    let mut z =
        seed ^ ((iteration as u64) << 40) ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Cross-entropy random shooting. Sample `s` of iteration `i` draws its
/// noise from a stream keyed on `(seed, i, s)`, so a run with more samples
/// sees a superset of a smaller run's first-iteration candidates. Returns
/// the best sequence seen.
pub fn shooting_plan<P: ShootingProblem>(
    problem: &P,
    cfg: &CemConfig,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<ShootingResult> {
    cfg.validate()?;
    let m = problem.control_dim();
    let n = problem.horizon();
    let (lo, hi) = problem.limits();
    let dim = m * n;
    let mut mean = DVector::zeros(dim);
    if let Some(w) = warm_start {
        for (k, u) in w.iter().take(n).enumerate() {
            mean.rows_mut(k * m, m).copy_from(u);
        }
    }
    let mut std = DVector::from_fn(dim, |i, _| cfg.init_std * 0.5 * (hi[i % m] - lo[i % m]));
    let elites = ((cfg.samples as f64 * cfg.elite_fraction).ceil() as usize).clamp(1, cfg.samples);
    let split = |v: &DVector<f64>| {
        (0..n)
            .map(|k| v.rows(k * m, m).into_owned())
            .collect::<Vec<_>>()
    };
    let clamp = |v: DVector<f64>| DVector::from_fn(dim, |i, _| v[i].clamp(lo[i % m], hi[i % m]));

    let mut best = (f64::INFINITY, DVector::zeros(dim));
    let mut evaluations = 0;
    for it in 0..cfg.iterations {
        let mut scored: Vec<(f64, DVector<f64>)> = (0..cfg.samples)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, it, s));
                let noise = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                let cand = clamp(&mean + std.component_mul(&noise));
                (problem.cost(&split(&cand)), cand)
            })
            .collect();
        evaluations += scored.len();
        // Stable ordering keeps ties deterministic.
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        if scored[0].0 < best.0 {
            best = scored[0].clone();
        }
        let top = &scored[..elites];
        let k = top.len() as f64;
        mean = top.iter().fold(DVector::zeros(dim), |acc, (_, u)| acc + u) / k;
        std = top
            .iter()
            .fold(DVector::zeros(dim), |acc, (_, u)| {
                let d = u - &mean;
                acc + d.component_mul(&d)
            })
            .map(|v| (v / k).sqrt());
    }
    Ok(ShootingResult {
        controls: split(&best.1),
        cost: best.0,
        evaluations,
    })
}

/// Arm tracking through the true plant with a quadratic penalty on sphere
/// penetration of the `d_min` shell. Obstacles move at constant velocity
/// over the horizon.
#[derive(Debug, Clone)]
pub struct ArmShooting<'a> {
    pub plant: &'a Plant,
    pub state: PlantState,
    /// `reference[k]` targets the state `k + 1` steps ahead.
    pub reference: &'a [DVector<f64>],
    pub cfg: &'a MpcConfig,
    pub obstacles: &'a [Obstacle],
    pub d_min: f64,
    pub penalty: f64,
}

impl ShootingProblem for ArmShooting<'_> {
    fn control_dim(&self) -> usize {
        self.plant.chain.joint_count()
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn limits(&self) -> (DVector<f64>, DVector<f64>) {
        (self.plant.chain.u_min(), self.plant.chain.u_max())
    }

    fn cost(&self, controls: &[DVector<f64>]) -> f64 {
        let mut s = self.state.clone();
        let mut cost = 0.0;
        let n = self.cfg.horizon;
        for (k, u) in controls.iter().enumerate() {
            let Ok(next) = self.plant.step(&s, u) else {
                return f64::INFINITY;
            };
            s = next;
            let w = if k + 1 == n {
                &self.cfg.terminal_weights
            } else {
                &self.cfg.state_weights
            };
            let x = s.to_vector();
            cost += x
                .iter()
                .zip(self.reference[k].iter())
                .zip(w)
                .map(|((x, r), w)| w * (x - r) * (x - r))
                .sum::<f64>();
            cost += u
                .iter()
                .zip(&self.cfg.control_weights)
                .map(|(u, r)| r * u * u)
                .sum::<f64>();
            if !self.obstacles.is_empty() {
                let Ok(centres) = self.plant.chain.forward_kinematics(&s.q) else {
                    return f64::INFINITY;
                };
                let shift = self.plant.dt * (k + 1) as f64;
                for (i, c) in centres.iter().enumerate() {
                    let r = self.plant.chain.sphere_radius(i);
                    for o in self.obstacles {
                        let d = (c - (&o.position + &o.velocity * shift)).norm() - r;
                        let v = (self.d_min - d).max(0.0);
                        cost += self.penalty * v * v;
                    }
                }
            }
        }
        cost
    }
}

/// Shooting plan for the arm tracking problem; the caller filters the
/// first control.
pub fn shooting_nmpc(
    problem: &ArmShooting<'_>,
    cfg: &CemConfig,
    warm_start: Option<&[DVector<f64>]>,
) -> Result<ShootingResult> {
    if problem.reference.len() < problem.cfg.horizon {
        return Err(Error::dims(
            "reference window",
            problem.cfg.horizon,
            problem.reference.len(),
        ));
    }
    shooting_plan(problem, cfg, warm_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::{tracking_qp, Condensed};
    use crate::qp::QpSolver;
    use nalgebra::DMatrix;

    /// Double integrator driven to a target, the same cost as the condensed QP.
    struct Toy {
        cond: Condensed,
        cfg: MpcConfig,
        reference: Vec<DVector<f64>>,
    }

    impl ShootingProblem for Toy {
        fn control_dim(&self) -> usize {
            1
        }
        fn horizon(&self) -> usize {
            self.cfg.horizon
        }
        fn limits(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(1, -1.0),
                DVector::from_element(1, 1.0),
            )
        }
        fn cost(&self, controls: &[DVector<f64>]) -> f64 {
            let u = DVector::from_iterator(controls.len(), controls.iter().map(|c| c[0]));
            crate::mpc::rollout_cost(&self.cond, &self.cfg, &self.reference, &u)
        }
    }

    fn toy() -> Toy {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.005, 0.1]);
        let z0 = DVector::from_vec(vec![0.0, 0.0]);
        let cfg = MpcConfig {
            horizon: 4,
            state_weights: vec![1.0, 0.1],
            terminal_weights: vec![5.0, 0.5],
            control_weights: vec![0.01],
            ..MpcConfig::default()
        };
        let cond = Condensed::new(&a, &b, &z0, 2, 4).unwrap();
        let reference = (0..4).map(|_| DVector::from_vec(vec![0.05, 0.0])).collect();
        Toy {
            cond,
            cfg,
            reference,
        }
    }

    #[test]
    fn zero_variance_single_sample_returns_zero() {
        let t = toy();
        let cfg = CemConfig {
            samples: 1,
            iterations: 1,
            init_std: 0.0,
            ..CemConfig::default()
        };
        let out = shooting_plan(&t, &cfg, None).unwrap();
        assert!(out.controls.iter().all(|u| u[0] == 0.0));
    }

    #[test]
    fn large_sample_cost_near_qp_optimum() {
        let t = toy();
        let lim = DVector::from_element(1, 1.0);
        let qp = tracking_qp(&t.cond, &t.cfg, &t.reference, &(-&lim), &lim).unwrap();
        let opt = QpSolver::default().solve(&qp, None).unwrap().objective;
        let cfg = CemConfig {
            samples: 1000,
            iterations: 5,
            seed: 4,
            ..CemConfig::default()
        };
        let out = shooting_plan(&t, &cfg, None).unwrap();
        assert!(out.cost >= opt - 1e-9);
        assert!(out.cost <= opt * 1.05, "{} vs {}", out.cost, opt);
    }

    #[test]
    fn more_samples_never_worse_with_common_numbers() {
        let t = toy();
        for seed in 0..5 {
            let small = CemConfig {
                samples: 10,
                iterations: 1,
                seed,
                ..CemConfig::default()
            };
            let big = CemConfig {
                samples: 100,
                ..small.clone()
            };
            let a = shooting_plan(&t, &small, None).unwrap();
            let b = shooting_plan(&t, &big, None).unwrap();
            assert!(b.cost <= a.cost);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let t = toy();
        let cfg = CemConfig {
            samples: 50,
            seed: 11,
            ..CemConfig::default()
        };
        let a = shooting_plan(&t, &cfg, None).unwrap();
        let b = shooting_plan(&t, &cfg, None).unwrap();
        assert_eq!(a.controls, b.controls);
    }
}
