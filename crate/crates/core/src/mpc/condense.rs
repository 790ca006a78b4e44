use nalgebra::{DMatrix, DVector};

use super::MpcConfig;
use crate::error::{Error, Result};
use crate::qp::QpProblem;

/// Predicted states of a linear model as affine functions of the stacked
/// controls `U = [u_0; …; u_{N-1}]`: `x_k = free[k] + maps[k] · U`.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub free: Vec<DVector<f64>>,
    pub maps: Vec<DMatrix<f64>>,
    pub control_dim: usize,
}

impl Condensed {
    /// Rolls `z' = A z + B u` forward `horizon` steps from `z0` and keeps the
    /// leading `nx` coordinates of every predicted state.
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        z0: &DVector<f64>,
        nx: usize,
        horizon: usize,
    ) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || b.nrows() != d || z0.len() != d {
            return Err(Error::dims("condensed model", d, z0.len()));
        }
        if nx > d || horizon == 0 {
            return Err(Error::param(
                "horizon must be positive and nx within the model",
            ));
        }
        let m = b.ncols();
        // Markov blocks P Aⁱ B.
        let mut markov = Vec::with_capacity(horizon);
        let mut apow_b = b.clone();
        for _ in 0..horizon {
            markov.push(apow_b.rows(0, nx).into_owned());
            apow_b = a * apow_b;
        }
        let mut free = Vec::with_capacity(horizon + 1);
        let mut z = z0.clone();
        free.push(z.rows(0, nx).into_owned());
        for _ in 0..horizon {
            z = a * z;
            free.push(z.rows(0, nx).into_owned());
        }
        let mut maps = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut s = DMatrix::zeros(nx, horizon * m);
            for j in 0..k {
                s.view_mut((0, j * m), (nx, m))
                    .copy_from(&markov[k - 1 - j]);
            }
            maps.push(s);
        }
        Ok(Self {
            free,
            maps,
            control_dim: m,
        })
    }

    /// Adds the response to an input held at `u_known` on every step
    /// through `b_known`, for inputs that are not decision variables.
    pub fn add_known_input(
        &mut self,
        a: &DMatrix<f64>,
        b_known: &DMatrix<f64>,
        u_known: &DVector<f64>,
    ) -> Result<()> {
        if b_known.nrows() != a.nrows() || b_known.ncols() != u_known.len() {
            return Err(Error::dims("known input", b_known.ncols(), u_known.len()));
        }
        let nx = self.free[0].len();
        let push = b_known * u_known;
        let mut w = DVector::zeros(a.nrows());
        for k in 1..self.free.len() {
            w = a * w + &push;
            self.free[k] += w.rows(0, nx);
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.free.len() - 1
    }

    pub fn decision_dim(&self) -> usize {
        self.horizon() * self.control_dim
    }

    pub fn predict(&self, controls: &DVector<f64>) -> Vec<DVector<f64>> {
        self.free
            .iter()
            .zip(&self.maps)
            .map(|(f, s)| f + s * controls)
            .collect()
    }
}

/// Stage weight on the predicted state `k = 1..=N`.
fn state_weight(cfg: &MpcConfig, k: usize) -> &[f64] {
    if k == cfg.horizon {
        &cfg.terminal_weights
    } else {
        &cfg.state_weights
    }
}

/// `Σ_{k=1..N} ‖x_k - r_k‖²_{Q_k} + Σ_k ‖u_k‖²_R`, cost of a control
/// sequence through explicit prediction.
pub fn rollout_cost(
    cond: &Condensed,
    cfg: &MpcConfig,
    reference: &[DVector<f64>],
    controls: &DVector<f64>,
) -> f64 {
    let xs = cond.predict(controls);
    let m = cond.control_dim;
    let mut cost = 0.0;
    for k in 1..=cond.horizon() {
        let w = state_weight(cfg, k);
        let e = &xs[k] - &reference[k - 1];
        cost += e.iter().zip(w).map(|(e, w)| w * e * e).sum::<f64>();
    }
    for (i, u) in controls.iter().enumerate() {
        cost += cfg.control_weights[i % m] * u * u;
    }
    cost
}

/// Tracking objective over the stacked controls with box limits.
/// `reference[k - 1]` is the target of predicted state `k`.
pub fn tracking_qp(
    cond: &Condensed,
    cfg: &MpcConfig,
    reference: &[DVector<f64>],
    u_min: &DVector<f64>,
    u_max: &DVector<f64>,
) -> Result<QpProblem> {
    let n = cond.horizon();
    let m = cond.control_dim;
    let nx = cond.free[0].len();
    if reference.len() < n {
        return Err(Error::dims("reference window", n, reference.len()));
    }
    if cfg.state_weights.len() != nx
        || cfg.terminal_weights.len() != nx
        || cfg.control_weights.len() != m
    {
        return Err(Error::dims("cost weights", nx, cfg.state_weights.len()));
    }
    if u_min.len() != m || u_max.len() != m {
        return Err(Error::dims("control limits", m, u_min.len()));
    }
    let v = n * m;
    let mut h = DMatrix::zeros(v, v);
    let mut g = DVector::zeros(v);
    let mut offset = 0.0;
    for k in 1..=n {
        let w = DVector::from_column_slice(state_weight(cfg, k));
        if reference[k - 1].len() != nx {
            return Err(Error::dims("reference state", nx, reference[k - 1].len()));
        }
        let e = &cond.free[k] - &reference[k - 1];
        // Only the first k·m columns of the map are nonzero.
        let cols = k * m;
        let s = cond.maps[k].columns(0, cols);
        let mut ws = s.clone_owned();
        for (r, mut row) in ws.row_iter_mut().enumerate() {
            row *= w[r];
        }
        let mut block = h.view_mut((0, 0), (cols, cols));
        block += s.tr_mul(&ws) * 2.0;
        let mut gb = g.rows_mut(0, cols);
        gb += ws.tr_mul(&e) * 2.0;
        offset += e.component_mul(&e).dot(&w);
    }
    for i in 0..v {
        h[(i, i)] += 2.0 * cfg.control_weights[i % m];
    }
    // Exact symmetry for the solver's check.
    let h = (&h + h.transpose()) * 0.5;
    let lb = DVector::from_fn(v, |i, _| u_min[i % m]);
    let ub = DVector::from_fn(v, |i, _| u_max[i % m]);
    let mut qp = QpProblem::new(h, g)?.with_bounds(lb, ub)?;
    qp.offset = offset;
    Ok(qp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type System = (
        DMatrix<f64>,
        DMatrix<f64>,
        DVector<f64>,
        MpcConfig,
        Vec<DVector<f64>>,
    );

    fn random_system(seed: u64) -> System {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let a = DMatrix::identity(d, d) + DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.1..0.1));
        let b = DMatrix::from_fn(d, 2, |_, _| rng.gen_range(-0.5..0.5));
        let z0 = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let cfg = MpcConfig {
            horizon: 4,
            state_weights: vec![1.0, 2.0, 0.5],
            terminal_weights: vec![3.0, 1.0, 1.0],
            control_weights: vec![0.1, 0.2],
            ..MpcConfig::default()
        };
        let reference = (0..4)
            .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        (a, b, z0, cfg, reference)
    }

    #[test]
    fn predictions_match_explicit_rollout() {
        let (a, b, z0, _, _) = random_system(1);
        let cond = Condensed::new(&a, &b, &z0, 3, 4).unwrap();
        let u = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.0, 0.2, 0.9]);
        let mut z = z0.clone();
        let xs = cond.predict(&u);
        assert!((&xs[0] - z.rows(0, 3)).amax() < 1e-15);
        for k in 0..4 {
            z = &a * z + &b * u.rows(2 * k, 2);
            assert!((&xs[k + 1] - z.rows(0, 3)).amax() < 1e-12);
        }
    }

    #[test]
    fn objective_equals_rollout_cost() {
        let (a, b, z0, cfg, reference) = random_system(2);
        let cond = Condensed::new(&a, &b, &z0, 3, 4).unwrap();
        let lim = DVector::from_element(2, 1.0);
        let qp = tracking_qp(&cond, &cfg, &reference, &(-&lim), &lim).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u = DVector::from_fn(8, |_, _| rng.gen_range(-2.0..2.0));
            let direct = rollout_cost(&cond, &cfg, &reference, &u);
            assert!((qp.objective(&u) - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    #[test]
    fn scalar_one_step_matches_hand_solution() {
        // x' = x + 0.5 u, cost q (x1 - r)² + ρ u²; optimum u = q·0.5(r - x0) / (q·0.25 + ρ).
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 0.5);
        let z0 = DVector::from_element(1, 0.2);
        let cfg = MpcConfig {
            horizon: 1,
            state_weights: vec![4.0],
            terminal_weights: vec![4.0],
            control_weights: vec![0.3],
            ..MpcConfig::default()
        };
        let r = vec![DVector::from_element(1, 1.0)];
        let cond = Condensed::new(&a, &b, &z0, 1, 1).unwrap();
        let lim = DVector::from_element(1, 10.0);
        let qp = tracking_qp(&cond, &cfg, &r, &(-&lim), &lim).unwrap();
        let u = -qp.linear[0] / qp.hessian[(0, 0)];
        let expected = 4.0 * 0.5 * 0.8 / (4.0 * 0.25 + 0.3);
        assert!((u - expected).abs() < 1e-12);
    }
}
