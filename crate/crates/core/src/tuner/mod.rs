//! Adversarial tuning of the safety-index parameters: a critic searches
//! boundary states where no saturated control keeps the index from rising
//! and a learner adjusts `(n, β)` to lower that risk.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::SerialChain;
use crate::koopnet::KoopmanModel;
use crate::safety::{kinematic_row, lifted_displacement, proximity, Obstacle, SafetyIndex};

/// Largest control dimension for which vertices are enumerated.
pub const MAX_VERTEX_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub initial_n: f64,
    pub initial_beta: f64,
    /// Weight of `‖Γ - Γ₀‖²`.
    pub regularization: f64,
    /// Counterexamples needed before the learner steps.
    pub batch_size: usize,
    /// Sampling rounds the critic may use per collection.
    pub trials: usize,
    pub samples_per_trial: usize,
    /// Largest joint-space step of the boundary projection (rad).
    pub critic_step: f64,
    pub learner_step: f64,
    pub boundary_threshold: f64,
    pub boundary_band: f64,
    pub projection_iters: usize,
    pub max_rounds: usize,
    /// Joint sampling interval, shared by every joint.
    pub joint_range: (f64, f64),
    /// When positive the obstacle moves at this speed toward the nearest
    /// sphere of each sampled state.
    pub chase_speed: f64,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            initial_n: 1.0,
            initial_beta: 0.1,
            regularization: 0.01,
            batch_size: 50,
            trials: 10,
            samples_per_trial: 100,
            critic_step: 0.05,
            learner_step: 0.01,
            boundary_threshold: 1e-4,
            boundary_band: 0.02,
            projection_iters: 400,
            max_rounds: 100,
            joint_range: (-std::f64::consts::PI, std::f64::consts::PI),
            chase_speed: 0.0,
            seed: 0,
        }
    }
}

impl TunerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.critic_step,
            self.learner_step,
            self.boundary_threshold,
            self.boundary_band,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::param(
                "tuner step sizes and thresholds must be positive",
            ));
        }
        if !(self.regularization >= 0.0) || !(self.chase_speed >= 0.0) {
            return Err(Error::param(
                "regularization and chase speed must be non-negative",
            ));
        }
        if self.batch_size == 0
            || self.trials == 0
            || self.samples_per_trial == 0
            || self.max_rounds == 0
        {
            return Err(Error::param("tuner counts must be at least 1"));
        }
        if !(self.joint_range.0 < self.joint_range.1) {
            return Err(Error::param("joint range is empty"));
        }
        Ok(())
    }

    pub fn initial_index(&self, d_min: f64) -> Result<SafetyIndex> {
        SafetyIndex::new(self.initial_n, self.initial_beta, d_min)
    }
}

/// Risk of one link at a recorded state, stored in a form that can be
/// re-evaluated for any `(n, β)` with the same minimising vertex:
/// `risk = -slope(distance) · rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRisk {
    pub link: usize,
    pub distance: f64,
    /// Sphere speed along the obstacle direction at the minimising vertex,
    /// net of obstacle motion.
    pub rate: f64,
    pub vertex: usize,
    pub risk: f64,
}

impl LinkRisk {
    fn value(&self, index: &SafetyIndex) -> f64 {
        -index.slope(self.distance) * self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub x: DVector<f64>,
    pub obstacle: Obstacle,
    pub links: Vec<LinkRisk>,
}

impl Counterexample {
    pub fn mean_risk(&self) -> f64 {
        self.links.iter().map(|l| l.risk).sum::<f64>() / self.links.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Collection {
    /// The quota was met.
    Batch(Vec<Counterexample>),
    /// All trials ran without meeting the quota.
    Exhausted(Vec<Counterexample>),
}

impl Collection {
    pub fn counterexamples(&self) -> &[Counterexample] {
        match self {
            Self::Batch(c) | Self::Exhausted(c) => c,
        }
    }
}

fn vertex(index: usize, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(
        lo.len(),
        |j, _| if index >> j & 1 == 1 { hi[j] } else { lo[j] },
    )
}

fn check_vertex_dim(m: usize) -> Result<()> {
    if m > MAX_VERTEX_DIM {
        return Err(Error::param(format!(
            "{m} controls exceed the vertex limit of {MAX_VERTEX_DIM}"
        )));
    }
    Ok(())
}

/// Raw index-rate row of `link` under the lifted model, ignoring the bound.
fn raw_row(
    index: &SafetyIndex,
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &Obstacle,
    x: &DVector<f64>,
    z: &DVector<f64>,
    link: usize,
) -> Result<crate::safety::PhiDotRow> {
    let q = x
        .rows(model.layout.joint_offset, model.layout.joint_count)
        .into_owned();
    let jac = chain.position_jacobian(&q, link)?;
    let centre = &chain.forward_kinematics(&q)?[link];
    let prox = proximity(
        centre,
        chain.sphere_radius(link),
        &obstacle.position,
        index,
        link,
        0,
    )?;
    let (input_map, drift) = lifted_displacement(model, z, &jac)?;
    Ok(kinematic_row(
        &prox,
        &input_map,
        &drift,
        &obstacle.velocity,
        model.dt,
        0.0,
    ))
}

fn link_risk(
    index: &SafetyIndex,
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &Obstacle,
    x: &DVector<f64>,
    z: &DVector<f64>,
    link: usize,
) -> Result<LinkRisk> {
    let m = chain.joint_count();
    check_vertex_dim(m)?;
    let row = raw_row(index, model, chain, obstacle, x, z, link)?;
    let (lo, hi) = (chain.u_min(), chain.u_max());
    let mut best = (f64::INFINITY, 0);
    for v in 0..1usize << m {
        let r = row.rate(&vertex(v, &lo, &hi));
        if r < best.0 {
            best = (r, v);
        }
    }
    let q = x
        .rows(model.layout.joint_offset, model.layout.joint_count)
        .into_owned();
    let jac = chain.position_jacobian(&q, link)?;
    let (input_map, drift) = lifted_displacement(model, z, &jac)?;
    let disp = input_map * vertex(best.1, &lo, &hi) + drift - &obstacle.velocity * model.dt;
    Ok(LinkRisk {
        link,
        distance: row.distance,
        rate: row.unit.dot(&disp) / model.dt,
        vertex: best.1,
        risk: best.0,
    })
}

/// Smallest index rate over the saturated control vertices for one link,
/// under the lifted model and without the safety bound.
pub fn infeasibility_risk(
    index: &SafetyIndex,
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &Obstacle,
    x: &DVector<f64>,
    link: usize,
) -> Result<f64> {
    let z = model.lift(x)?;
    Ok(link_risk(index, model, chain, obstacle, x, &z, link)?.risk)
}

fn distance_grad(
    chain: &SerialChain,
    q: &DVector<f64>,
    obstacle: &DVector<f64>,
) -> Result<Vec<(f64, DVector<f64>)>> {
    chain
        .sphere_geometry(q)?
        .into_iter()
        .map(|s| {
            let off = obstacle - &s.center;
            let gap = off.norm();
            if gap < 1e-12 {
                return Err(Error::CoincidentPoints);
            }
            let unit = off / gap;
            Ok((gap - s.radius, -s.jacobian.tr_mul(&unit)))
        })
        .collect()
}

fn boundary_loss(dists: &[(f64, DVector<f64>)], d_min: f64) -> (f64, DVector<f64>) {
    let n = dists[0].1.len();
    let mut loss = 0.0;
    let mut grad = DVector::zeros(n);
    for (d, g) in dists {
        if *d < d_min {
            loss += d_min - d;
            grad -= g;
        }
    }
    let (i, nearest) = dists
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, v)| (i, v.0))
        .unwrap_or((0, f64::INFINITY));
    if nearest > d_min {
        loss += nearest - d_min;
        grad += &dists[i].1;
    }
    (loss, grad)
}

/// Moves `q` until no sphere is inside the `d_min` shell and the nearest
/// sphere lies on it. Steps are Polyak steps on the piecewise-linear loss,
/// capped at `critic_step` in joint space. `None` when the loss does not
/// reach the threshold within the iteration cap.
pub fn project_to_boundary(
    chain: &SerialChain,
    obstacle: &DVector<f64>,
    q_init: &DVector<f64>,
    d_min: f64,
    cfg: &TunerConfig,
) -> Result<Option<DVector<f64>>> {
    let mut q = q_init.clone();
    for _ in 0..=cfg.projection_iters {
        let dists = distance_grad(chain, &q, obstacle)?;
        let (loss, grad) = boundary_loss(&dists, d_min);
        if loss <= cfg.boundary_threshold {
            return Ok(Some(q));
        }
        let gn = grad.norm();
        if gn < 1e-12 {
            return Ok(None);
        }
        let step = (loss / (gn * gn)).min(cfg.critic_step / gn);
        q -= grad * step;
    }
    Ok(None)
}

fn state_of(model: &KoopmanModel, chain: &SerialChain, q: &DVector<f64>) -> Result<DVector<f64>> {
    let mut x = DVector::zeros(model.state_dim());
    let off = model.layout.joint_offset;
    if off > 0 {
        let tip = chain.tip(q)?;
        x.rows_mut(0, off).copy_from(&tip.rows(0, off));
    }
    x.rows_mut(off, q.len()).copy_from(q);
    Ok(x)
}

/// Boundary-active links at a state and the check that every control
/// vertex drives at least one of them outward. Returns the counterexample
/// when the check holds.
pub fn check_state(
    index: &SafetyIndex,
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &Obstacle,
    q: &DVector<f64>,
    band: f64,
) -> Result<Option<Counterexample>> {
    let m = chain.joint_count();
    check_vertex_dim(m)?;
    let x = state_of(model, chain, q)?;
    let z = model.lift(&x)?;
    let dists = distance_grad(chain, q, &obstacle.position)?;
    let active: Vec<usize> = (0..dists.len())
        .filter(|&i| (dists[i].0 - index.d_min).abs() <= band)
        .collect();
    if active.is_empty() {
        return Ok(None);
    }
    let rows = active
        .iter()
        .map(|&i| raw_row(index, model, chain, obstacle, &x, &z, i))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = (chain.u_min(), chain.u_max());
    let blocked = (0..1usize << m).all(|v| {
        let u = vertex(v, &lo, &hi);
        rows.iter().any(|r| r.rate(&u) > 0.0)
    });
    if !blocked {
        return Ok(None);
    }
    let links = active
        .iter()
        .map(|&i| link_risk(index, model, chain, obstacle, &x, &z, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Counterexample {
        x,
        obstacle: obstacle.clone(),
        links,
    }))
}

fn chase_velocity(
    chain: &SerialChain,
    q: &DVector<f64>,
    obstacle: &DVector<f64>,
    speed: f64,
) -> Result<DVector<f64>> {
    let dists = distance_grad(chain, q, obstacle)?;
    let nearest = (0..dists.len())
        .min_by(|a, b| dists[*a].0.total_cmp(&dists[*b].0))
        .unwrap_or(0);
    let centres = chain.forward_kinematics(q)?;
    let to = &centres[nearest] - obstacle;
    Ok(to.normalize() * speed)
}

/// Samples joint configurations, projects them to the geometric boundary
/// and keeps the blocked ones until `batch_size` are found or the trials
/// run out.
pub fn collect_counterexamples(
    index: &SafetyIndex,
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &DVector<f64>,
    cfg: &TunerConfig,
    seed: u64,
) -> Result<Collection> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.joint_count();
    let mut found = Vec::new();
    for _ in 0..cfg.trials {
        for _ in 0..cfg.samples_per_trial {
            let q0 = DVector::from_fn(n, |_, _| {
                rng.gen_range(cfg.joint_range.0..cfg.joint_range.1)
            });
            let Some(q) = project_to_boundary(chain, obstacle, &q0, index.d_min, cfg)? else {
                continue;
            };
            let velocity = if cfg.chase_speed > 0.0 {
                chase_velocity(chain, &q, obstacle, cfg.chase_speed)?
            } else {
                DVector::zeros(obstacle.len())
            };
            let obs = Obstacle {
                position: obstacle.clone(),
                velocity,
            };
            if let Some(ce) = check_state(index, model, chain, &obs, &q, cfg.boundary_band)? {
                found.push(ce);
                if found.len() >= cfg.batch_size {
                    return Ok(Collection::Batch(found));
                }
            }
        }
    }
    Ok(Collection::Exhausted(found))
}

/// Mean over counterexamples of the mean link risk under `index`, plus
/// the regulariser, and its gradient in `(n, β)`.
pub fn total_loss(
    index: &SafetyIndex,
    batch: &[Counterexample],
    cfg: &TunerConfig,
) -> (f64, [f64; 2]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 2];
    for ce in batch {
        let k = ce.links.len() as f64;
        for l in &ce.links {
            loss += l.value(index) / k;
            grad[0] -= index.slope_dn(l.distance) * l.rate / k;
            grad[1] -= l.rate / k;
        }
    }
    let b = batch.len().max(1) as f64;
    loss /= b;
    grad[0] /= b;
    grad[1] /= b;
    let dn = index.n - cfg.initial_n;
    let db = index.beta - cfg.initial_beta;
    loss += cfg.regularization * (dn * dn + db * db);
    grad[0] += 2.0 * cfg.regularization * dn;
    grad[1] += 2.0 * cfg.regularization * db;
    (loss, grad)
}

pub const N_RANGE: (f64, f64) = (0.1, 4.0);
pub const BETA_RANGE: (f64, f64) = (-2.0, 2.0);

/// One gradient step on `(n, β)`, clamped to the admissible box.
pub fn learner_update(
    index: &SafetyIndex,
    batch: &[Counterexample],
    cfg: &TunerConfig,
) -> Result<SafetyIndex> {
    if batch.is_empty() {
        return Err(Error::param(
            "learner update needs at least one counterexample",
        ));
    }
    let (_, g) = total_loss(index, batch, cfg);
    let n = (index.n - cfg.learner_step * g[0]).clamp(N_RANGE.0, N_RANGE.1);
    let beta = (index.beta - cfg.learner_step * g[1]).clamp(BETA_RANGE.0, BETA_RANGE.1);
    if !(n.is_finite() && beta.is_finite()) {
        return Err(Error::param("learner produced non-finite parameters"));
    }
    index.with_params(n, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub round: usize,
    pub counterexamples_found: usize,
    pub mean_risk: f64,
    pub n: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub index: SafetyIndex,
    pub audit: Vec<AuditRow>,
    /// The critic ran out of trials before the round cap.
    pub converged: bool,
}

fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(round as u64 + 1)
}

/// Alternates collection and learner steps until the critic is exhausted
/// or the round cap is hit.
pub fn tune(
    model: &KoopmanModel,
    chain: &SerialChain,
    obstacle: &DVector<f64>,
    d_min: f64,
    cfg: &TunerConfig,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut index = cfg.initial_index(d_min)?;
    let mut audit = Vec::new();
    for round in 0..cfg.max_rounds {
        let collection = collect_counterexamples(
            &index,
            model,
            chain,
            obstacle,
            cfg,
            round_seed(cfg.seed, round),
        )?;
        let found = collection.counterexamples();
        let mean_risk = if found.is_empty() {
            0.0
        } else {
            found.iter().map(Counterexample::mean_risk).sum::<f64>() / found.len() as f64
        };
        if let Collection::Batch(batch) = &collection {
            index = learner_update(&index, batch, cfg)?;
        }
        audit.push(AuditRow {
            round,
            counterexamples_found: found.len(),
            mean_risk,
            n: index.n,
            beta: index.beta,
        });
        if matches!(collection, Collection::Exhausted(_)) {
            return Ok(TuneOutcome {
                index,
                audit,
                converged: true,
            });
        }
    }
    Ok(TuneOutcome {
        index,
        audit,
        converged: false,
    })
}

pub fn write_audit(rows: &[AuditRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
