use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::KoopmanModel;
use super::network::Dense;
use crate::error::{Error, Result};
use crate::kinematics::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollout depth of the prediction loss.
    pub horizon: usize,
    /// Per-step decay of the loss weights.
    pub gamma: f64,
    pub learning_rate: f64,
    /// The rate follows a cosine schedule down to `learning_rate * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            gamma: 0.9,
            learning_rate: 1e-3,
            min_lr_ratio: 0.05,
            batch_size: 64,
            epochs: 40,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("rollout horizon must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::param(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::param(
                "learning rate must be positive and the decay ratio in [0, 1]",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("moment coefficients must lie in [0, 1)"));
        }
        Ok(())
    }

    fn rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let floor = self.learning_rate * self.min_lr_ratio;
        floor + 0.5 * (self.learning_rate - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// `K + 1` consecutive states and the `K` controls between them.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub states: &'a [DVector<f64>],
    pub controls: &'a [DVector<f64>],
}

/// Every stride-one window of depth `k` across `data`.
pub fn windows(data: &[Trajectory], k: usize) -> Vec<Window<'_>> {
    let mut out = Vec::new();
    for traj in data {
        if traj.len() < k || k == 0 {
            continue;
        }
        for s in 0..=traj.len() - k {
            out.push(Window {
                states: &traj.states[s..s + k + 1],
                controls: &traj.controls[s..s + k],
            });
        }
    }
    out
}

/// Loss value with gradients for every trainable parameter.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub net: Vec<Dense>,
}

struct OperatorGrads {
    loss: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// Gradient with respect to each lifted target `z_i`, `i = 0..=K`.
    z: Vec<DMatrix<f64>>,
}

/// Discounted rollout loss over column-batched lifted states `zs[i]` and
/// controls `us[i]`, with the reverse pass through the operator chain.
fn operator_loss(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    zs: &[DMatrix<f64>],
    us: &[DMatrix<f64>],
    gamma: f64,
    need_z: bool,
) -> OperatorGrads {
    let k = us.len();
    let (dim, nb) = zs[0].shape();
    let norm = 1.0 / (dim * nb) as f64;
    let mut preds = Vec::with_capacity(k + 1);
    preds.push(zs[0].clone());
    for i in 1..=k {
        let next = a * &preds[i - 1] + b * &us[i - 1];
        preds.push(next);
    }
    let mut loss = 0.0;
    let mut weight = 1.0;
    let mut resid = Vec::with_capacity(k + 1);
    resid.push(DMatrix::zeros(0, 0));
    for i in 1..=k {
        let r = &zs[i] - &preds[i];
        loss += weight * norm * r.norm_squared();
        resid.push(r * (2.0 * weight * norm));
        weight *= gamma;
    }

    let mut da = DMatrix::zeros(dim, dim);
    let mut db = DMatrix::zeros(dim, b.ncols());
    let mut dz = if need_z {
        vec![DMatrix::zeros(dim, nb); k + 1]
    } else {
        Vec::new()
    };
    let mut adj = DMatrix::<f64>::zeros(dim, nb);
    for i in (1..=k).rev() {
        adj = a.tr_mul(&adj) - &resid[i];
        da += &adj * preds[i - 1].transpose();
        db += &adj * us[i - 1].transpose();
        if need_z {
            dz[i] += &resid[i];
        }
    }
    if need_z {
        dz[0] += a.tr_mul(&adj);
    }
    OperatorGrads {
        loss,
        a: da,
        b: db,
        z: dz,
    }
}

fn check_windows(model: &KoopmanModel, batch: &[Window<'_>]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::param("empty batch"))?;
    let k = first.controls.len();
    for w in batch {
        if w.controls.len() != k || w.states.len() != k + 1 {
            return Err(Error::dims("window length", k + 1, w.states.len()));
        }
        if let Some(x) = w.states.iter().find(|x| x.len() != model.state_dim()) {
            return Err(Error::dims("window state", model.state_dim(), x.len()));
        }
        if let Some(u) = w.controls.iter().find(|u| u.len() != model.control_dim()) {
            return Err(Error::dims("window control", model.control_dim(), u.len()));
        }
    }
    Ok(k)
}

fn stack_controls(batch: &[Window<'_>], k: usize, m: usize) -> Vec<DMatrix<f64>> {
    (0..k)
        .map(|i| DMatrix::from_fn(m, batch.len(), |r, c| batch[c].controls[i][r]))
        .collect()
}

/// `Σ_{i=1..K} γ^{i-1} MSE(lift(x_i), ẑ_i)` with `ẑ` rolled out from
/// `lift(x_0)`, and its gradient through both the rollout and the lifting
/// of predicted and target states.
pub fn kstep_loss_and_grads(
    model: &KoopmanModel,
    batch: &[Window<'_>],
    gamma: f64,
) -> Result<LossGrads> {
    let k = check_windows(model, batch)?;
    let nb = batch.len();
    let nx = model.state_dim();
    let d = model.latent_dim();
    let states = DMatrix::from_fn(nx, (k + 1) * nb, |r, c| batch[c % nb].states[c / nb][r]);
    let (psi, cache) = model.net.forward_batch(model.standardize_batch(&states));
    let zs: Vec<DMatrix<f64>> = (0..=k)
        .map(|i| {
            let mut z = DMatrix::zeros(nx + d, nb);
            z.view_mut((0, 0), (nx, nb))
                .copy_from(&states.columns(i * nb, nb));
            z.view_mut((nx, 0), (d, nb))
                .copy_from(&psi.columns(i * nb, nb));
            z
        })
        .collect();
    let us = stack_controls(batch, k, model.control_dim());
    let op = operator_loss(&model.a, &model.b, &zs, &us, gamma, true);

    let mut grad_psi = DMatrix::zeros(d, (k + 1) * nb);
    for (i, g) in op.z.iter().enumerate() {
        grad_psi.columns_mut(i * nb, nb).copy_from(&g.rows(nx, d));
    }
    let net = model.net.backward_batch(&cache, grad_psi);
    Ok(LossGrads {
        loss: op.loss,
        a: op.a,
        b: op.b,
        net,
    })
}

/// Adaptive-moment optimiser over a flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

fn flatten(a: &DMatrix<f64>, b: &DMatrix<f64>, net: Option<&[Dense]>) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(a.as_slice());
    out.extend_from_slice(b.as_slice());
    for layer in net.unwrap_or(&[]) {
        out.extend_from_slice(layer.weight.as_slice());
        out.extend_from_slice(layer.bias.as_slice());
    }
    out
}

fn unflatten(flat: &[f64], model: &mut KoopmanModel, with_net: bool) {
    let mut offset = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[offset..offset + dst.len()]);
        offset += dst.len();
    };
    take(model.a.as_mut_slice());
    take(model.b.as_mut_slice());
    if with_net {
        for layer in &mut model.net.layers {
            take(layer.weight.as_mut_slice());
            take(layer.bias.as_mut_slice());
        }
    }
}

/// Result of an optimisation run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest mean loss.
    pub model: KoopmanModel,
    /// Mean minibatch loss per epoch.
    pub history: Vec<f64>,
}

impl TrainOutcome {
    /// Running minimum of the history, which is what the returned model achieves.
    pub fn best_history(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

/// End-to-end training of the lifting network and both operators.
/// Refits the input standardisation to `data` first.
pub fn train(model: &KoopmanModel, data: &[Trajectory], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    model.fit_standardization(data);
    let all = windows(data, cfg.horizon);
    if all.is_empty() {
        return Err(Error::param(format!(
            "no trajectory has {} transitions",
            cfg.horizon
        )));
    }
    let mut params = flatten(&model.a, &model.b, Some(&model.net.layers));
    let mut adam = Adam::new(params.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Window<'_>> = chunk.iter().map(|&i| all[i]).collect();
            let g = kstep_loss_and_grads(&model, &batch, cfg.gamma)?;
            if !g.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss after {batches} batches"),
                });
            }
            total += g.loss;
            batches += 1;
            let grads = flatten(&g.a, &g.b, Some(&g.net));
            adam.step(&mut params, &grads, lr);
            unflatten(&params, &mut model, true);
        }
        let mean = total / batches as f64;
        history.push(mean);
        if mean < best.0 {
            best = (mean, model.clone());
        }
    }
    if cfg.epochs == 0 {
        best.1 = model;
    }
    Ok(TrainOutcome {
        model: best.1,
        history,
    })
}

/// Adapts only `A` and `B` to new data; the lifting network and its
/// standardisation are left untouched.
pub fn finetune_operators(
    model: &KoopmanModel,
    data: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: Vec::new(),
        });
    }
    let all = windows(data, cfg.horizon);
    if all.is_empty() {
        return Err(Error::param(format!(
            "no trajectory has {} transitions",
            cfg.horizon
        )));
    }
    check_windows(&model, &all)?;
    // Targets never change, so lift each window once.
    let lifted: Vec<Vec<DVector<f64>>> = all
        .iter()
        .map(|w| {
            w.states
                .iter()
                .map(|x| model.lift(x))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let k = cfg.horizon;
    let dim = model.lifted_dim();
    let mut params = flatten(&model.a, &model.b, None);
    let mut adam = Adam::new(params.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, model.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let zs: Vec<DMatrix<f64>> = (0..=k)
                .map(|i| DMatrix::from_fn(dim, chunk.len(), |r, c| lifted[chunk[c]][i][r]))
                .collect();
            let batch: Vec<Window<'_>> = chunk.iter().map(|&i| all[i]).collect();
            let us = stack_controls(&batch, k, model.control_dim());
            let op = operator_loss(&model.a, &model.b, &zs, &us, cfg.gamma, false);
            if !op.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite operator loss".into(),
                });
            }
            total += op.loss;
            batches += 1;
            adam.step(&mut params, &flatten(&op.a, &op.b, None), lr);
            unflatten(&params, &mut model, false);
        }
        let mean = total / batches as f64;
        history.push(mean);
        if mean < best.0 {
            best = (mean, model.clone());
        }
    }
    Ok(TrainOutcome {
        model: best.1,
        history,
    })
}

/// Open-loop prediction errors `‖x̂_h − x_h‖` for every start index of
/// every trajectory with at least `horizon` transitions remaining.
pub fn prediction_errors(
    model: &KoopmanModel,
    data: &[Trajectory],
    horizon: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for w in windows(data, horizon) {
        let z0 = model.lift(&w.states[0])?;
        let zs = model.rollout(&z0, w.controls)?;
        let xh = model.project(&zs[horizon - 1]);
        out.push((xh - &w.states[horizon]).norm());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{sample_dataset, JointLayout, Plant, SerialChain};
    use crate::koopnet::{ModelSpec, StateLayout};
    use rand::Rng;

    fn small_model(seed: u64) -> (KoopmanModel, Vec<Trajectory>) {
        let chain =
            SerialChain::symmetric(JointLayout::PlanarZ, vec![0.5, 0.4], vec![0.05; 2], 1.0)
                .unwrap();
        let plant = Plant::new(chain.clone(), 0.05, 0.7).unwrap();
        let data = sample_dataset(&plant, 3, 8, seed).unwrap().trajectories;
        let mut spec = ModelSpec::for_arm(&chain, 0.05, seed);
        spec.hidden = vec![5, 4];
        spec.latent = 3;
        let mut model = KoopmanModel::new(&spec).unwrap();
        model.fit_standardization(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let d = model.lifted_dim();
        model.a += DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.1..0.1));
        model.b += DMatrix::from_fn(d, 2, |_, _| rng.gen_range(-0.1..0.1));
        (model, data)
    }

    fn loss_of(model: &KoopmanModel, batch: &[Window<'_>]) -> f64 {
        kstep_loss_and_grads(model, batch, 0.8).unwrap().loss
    }

    fn check(analytic: f64, plus: f64, minus: f64, h: f64) {
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-4, "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, data) = small_model(3);
        let batch: Vec<_> = windows(&data, 3).into_iter().step_by(4).collect();
        let g = kstep_loss_and_grads(&model, &batch, 0.8).unwrap();
        let h = 1e-5;
        let d = model.lifted_dim();
        for (r, c) in [(0, 0), (2, 5), (6, 1), (4, 4), (d - 1, d - 1)] {
            let mut p = model.clone();
            p.a[(r, c)] += h;
            let mut m = model.clone();
            m.a[(r, c)] -= h;
            check(g.a[(r, c)], loss_of(&p, &batch), loss_of(&m, &batch), h);
        }
        for (r, c) in [(0, 0), (3, 1), (6, 0)] {
            let mut p = model.clone();
            p.b[(r, c)] += h;
            let mut m = model.clone();
            m.b[(r, c)] -= h;
            check(g.b[(r, c)], loss_of(&p, &batch), loss_of(&m, &batch), h);
        }
        for l in 0..model.net.layers.len() {
            for idx in 0..model.net.layers[l].weight.len() {
                let mut p = model.clone();
                p.net.layers[l].weight[idx] += h;
                let mut m = model.clone();
                m.net.layers[l].weight[idx] -= h;
                check(
                    g.net[l].weight[idx],
                    loss_of(&p, &batch),
                    loss_of(&m, &batch),
                    h,
                );
            }
            for idx in 0..model.net.layers[l].bias.len() {
                let mut p = model.clone();
                p.net.layers[l].bias[idx] += h;
                let mut m = model.clone();
                m.net.layers[l].bias[idx] -= h;
                check(
                    g.net[l].bias[idx],
                    loss_of(&p, &batch),
                    loss_of(&m, &batch),
                    h,
                );
            }
        }
    }

    #[test]
    fn single_step_loss_is_one_mse() {
        let (model, data) = small_model(4);
        let batch: Vec<_> = windows(&data, 1).into_iter().take(5).collect();
        let mut expected = 0.0;
        for w in &batch {
            let z0 = model.lift(&w.states[0]).unwrap();
            let pred = &model.a * z0 + &model.b * &w.controls[0];
            let target = model.lift(&w.states[1]).unwrap();
            expected += (target - pred).norm_squared() / model.lifted_dim() as f64;
        }
        expected /= batch.len() as f64;
        for gamma in [0.3, 1.0] {
            let got = kstep_loss_and_grads(&model, &batch, gamma).unwrap().loss;
            assert!((got - expected).abs() < 1e-14);
        }
    }

    fn linear_joint_data(seed: u64, count: usize) -> Vec<Trajectory> {
        let chain =
            SerialChain::symmetric(JointLayout::PlanarZ, vec![0.5, 0.4], vec![0.05; 2], 1.0)
                .unwrap();
        let plant = Plant::new(chain, 0.05, 1.0).unwrap();
        sample_dataset(&plant, count, 20, seed)
            .unwrap()
            .trajectories
            .into_iter()
            .map(|t| Trajectory {
                states: t.states.iter().map(|x| x.rows(2, 2).into_owned()).collect(),
                controls: t.controls,
            })
            .collect()
    }

    fn joint_spec(seed: u64) -> ModelSpec {
        ModelSpec {
            layout: StateLayout::joints_only(2),
            control_dim: 2,
            hidden: vec![8],
            latent: 2,
            dt: 0.05,
            integrators: vec![(0, 0), (1, 1)],
            seed,
        }
    }

    #[test]
    fn exact_model_has_zero_loss_and_gradient() {
        let data = linear_joint_data(1, 4);
        let mut model = KoopmanModel::new(&joint_spec(1)).unwrap();
        for l in &mut model.net.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let batch = windows(&data, 4);
        let g = kstep_loss_and_grads(&model, &batch, 0.9).unwrap();
        assert!(g.loss < 1e-28);
        assert!(g.a.amax() < 1e-14 && g.b.amax() < 1e-14);
        assert!(g
            .net
            .iter()
            .all(|l| l.weight.amax() < 1e-14 && l.bias.amax() < 1e-14));
    }

    #[test]
    fn linear_plant_is_learned_to_high_precision() {
        let data = linear_joint_data(2, 40);
        let held_out = linear_joint_data(99, 5);
        // The hand-built exact operators give zero error on this plant.
        let mut exact = KoopmanModel::new(&joint_spec(2)).unwrap();
        for l in &mut exact.net.layers {
            l.weight.fill(0.0);
        }
        let max = |m: &KoopmanModel| {
            prediction_errors(m, &held_out, 1)
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max)
        };
        assert!(max(&exact) < 1e-12);

        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            min_lr_ratio: 1e-3,
            ..TrainConfig::default()
        };
        let out = train(&KoopmanModel::new(&joint_spec(2)).unwrap(), &data, &cfg).unwrap();
        let best = out.best_history();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(max(&out.model) < 1e-6, "held-out error {}", max(&out.model));
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = small_model(5);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            horizon: 3,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn finetune_keeps_network_and_zero_epochs_is_identity() {
        let (model, data) = small_model(6);
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(
            finetune_operators(&model, &data, &zero).unwrap().model,
            model
        );
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 5e-3,
            ..TrainConfig::default()
        };
        let out = finetune_operators(&model, &data, &cfg).unwrap();
        assert_eq!(out.model.net, model.net);
        assert_eq!(out.model.norm_mean, model.norm_mean);
        assert_ne!(out.model.a, model.a);
        let before: f64 = prediction_errors(&model, &data, 1).unwrap().iter().sum();
        let after: f64 = prediction_errors(&out.model, &data, 1)
            .unwrap()
            .iter()
            .sum();
        assert!(after < before);
    }

    #[test]
    fn rejects_empty_batch_and_bad_config() {
        let (model, _) = small_model(7);
        assert!(kstep_loss_and_grads(&model, &[], 0.9).is_err());
        let bad = TrainConfig {
            gamma: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            horizon: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
