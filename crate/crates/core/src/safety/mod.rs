//! Distance-based safety indices and their linearised rate constraints.
//!
//! A row `(aᵀu + c) / dt ≤ rhs` bounds the one-step change of the index
//! for one (collision sphere, obstacle) pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{SerialChain, SphereGeometry};
use crate::koopnet::KoopmanModel;

/// Distances are floored here so the index gradient stays finite.
pub const MIN_DISTANCE: f64 = 1e-9;

/// `d_min - ‖p_ego - p_obs‖`.
pub fn phi0(p_ego: &DVector<f64>, p_obs: &DVector<f64>, d_min: f64) -> Result<f64> {
    if p_ego.len() != p_obs.len() {
        return Err(Error::dims("obstacle position", p_ego.len(), p_obs.len()));
    }
    let d = (p_ego - p_obs).norm();
    if d == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    Ok(d_min - d)
}

/// The reshaped index `d_minⁿ - dⁿ + β d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyIndex {
    pub n: f64,
    pub beta: f64,
    pub d_min: f64,
}

impl SafetyIndex {
    pub fn new(n: f64, beta: f64, d_min: f64) -> Result<Self> {
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::param(format!("exponent must be positive, got {n}")));
        }
        if !(d_min.is_finite() && d_min > 0.0) {
            return Err(Error::param(format!("d_min must be positive, got {d_min}")));
        }
        if !beta.is_finite() {
            return Err(Error::param("beta must be finite"));
        }
        Ok(Self { n, beta, d_min })
    }

    /// `n = 1, β = 0`: the plain signed distance.
    pub fn signed_distance(d_min: f64) -> Result<Self> {
        Self::new(1.0, 0.0, d_min)
    }

    pub fn with_params(self, n: f64, beta: f64) -> Result<Self> {
        Self::new(n, beta, self.d_min)
    }

    pub fn value(&self, d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::param(format!("distance must be positive, got {d}")));
        }
        Ok(self.d_min.powf(self.n) - d.powf(self.n) + self.beta * d)
    }

    /// dφ/dd.
    pub fn slope(&self, d: f64) -> f64 {
        -self.n * d.powf(self.n - 1.0) + self.beta
    }

    /// ∂(dφ/dd)/∂n.
    pub fn slope_dn(&self, d: f64) -> f64 {
        -d.powf(self.n - 1.0) * (1.0 + self.n * d.ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyBoundConfig {
    /// Required decrease rate while outside the allowable set.
    pub lambda: f64,
    /// Rows with `φ < -activation` are dropped.
    pub activation: f64,
    /// `|φ| ≤ boundary_tol` counts as on the boundary.
    pub boundary_tol: f64,
}

impl Default for SafetyBoundConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            activation: 0.3,
            boundary_tol: 1e-3,
        }
    }
}

impl SafetyBoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda > 0.0 && self.activation > 0.0 && self.boundary_tol > 0.0 {
            Ok(())
        } else {
            Err(Error::param("safety bound parameters must be positive"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SafetyBound {
    Bound(f64),
    Inactive,
}

pub fn safety_bound(phi: f64, cfg: &SafetyBoundConfig) -> SafetyBound {
    if phi.abs() <= cfg.boundary_tol {
        SafetyBound::Bound(0.0)
    } else if phi > cfg.boundary_tol {
        SafetyBound::Bound(-cfg.lambda)
    } else if phi >= -cfg.activation {
        SafetyBound::Bound(0.0)
    } else {
        SafetyBound::Inactive
    }
}

/// A point obstacle moving at constant velocity over one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub position: DVector<f64>,
    pub velocity: DVector<f64>,
}

impl Obstacle {
    pub fn fixed(position: DVector<f64>) -> Self {
        let w = position.len();
        Self {
            position,
            velocity: DVector::zeros(w),
        }
    }
}

/// Distance data of one (sphere, obstacle) pair under a given index.
#[derive(Debug, Clone, PartialEq)]
pub struct Proximity {
    pub link: usize,
    pub obstacle: usize,
    /// Sphere surface to obstacle centre, floored at [`MIN_DISTANCE`].
    pub distance: f64,
    /// Unit vector from the sphere centre towards the obstacle.
    pub unit: DVector<f64>,
    pub phi: f64,
    /// dφ/dd at `distance`.
    pub slope: f64,
}

pub fn proximity(
    center: &DVector<f64>,
    radius: f64,
    obstacle: &DVector<f64>,
    index: &SafetyIndex,
    link: usize,
    obstacle_index: usize,
) -> Result<Proximity> {
    if center.len() != obstacle.len() {
        return Err(Error::dims(
            "obstacle position",
            center.len(),
            obstacle.len(),
        ));
    }
    let offset = obstacle - center;
    let gap = offset.norm();
    if gap < 1e-12 {
        return Err(Error::CoincidentPoints);
    }
    let distance = (gap - radius).max(MIN_DISTANCE);
    Ok(Proximity {
        link,
        obstacle: obstacle_index,
        distance,
        unit: offset / gap,
        phi: index.value(distance)?,
        slope: index.slope(distance),
    })
}

/// Linear bound on the index rate of one sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiDotRow {
    pub a: DVector<f64>,
    pub c: f64,
    pub rhs: f64,
    pub dt: f64,
    pub link: usize,
    pub obstacle: usize,
    pub distance: f64,
    pub unit: DVector<f64>,
    pub phi: f64,
}

impl PhiDotRow {
    /// Predicted index rate under control `u`.
    pub fn rate(&self, u: &DVector<f64>) -> f64 {
        (self.a.dot(u) + self.c) / self.dt
    }

    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        self.rate(u) - self.rhs
    }
}

/// Row for a sphere whose one-step displacement is `input_map · u + drift`
/// while the obstacle moves by `obstacle_velocity · dt`.
pub fn kinematic_row(
    prox: &Proximity,
    input_map: &DMatrix<f64>,
    drift: &DVector<f64>,
    obstacle_velocity: &DVector<f64>,
    dt: f64,
    rhs: f64,
) -> PhiDotRow {
    let a = input_map.tr_mul(&prox.unit) * (-prox.slope);
    let c = -prox.slope * prox.unit.dot(drift) + prox.slope * prox.unit.dot(obstacle_velocity) * dt;
    PhiDotRow {
        a,
        c,
        rhs,
        dt,
        link: prox.link,
        obstacle: prox.obstacle,
        distance: prox.distance,
        unit: prox.unit.clone(),
        phi: prox.phi,
    }
}

/// Row under the kinematic model `q' = q + dt·u`.
pub fn analytic_row(
    sphere: &SphereGeometry,
    link: usize,
    obstacle: &Obstacle,
    obstacle_index: usize,
    index: &SafetyIndex,
    cfg: &SafetyBoundConfig,
    dt: f64,
) -> Result<Option<PhiDotRow>> {
    let prox = proximity(
        &sphere.center,
        sphere.radius,
        &obstacle.position,
        index,
        link,
        obstacle_index,
    )?;
    let SafetyBound::Bound(rhs) = safety_bound(prox.phi, cfg) else {
        return Ok(None);
    };
    let drift = DVector::zeros(sphere.center.len());
    Ok(Some(kinematic_row(
        &prox,
        &(&sphere.jacobian * dt),
        &drift,
        &obstacle.velocity,
        dt,
        rhs,
    )))
}

/// Row under one step of the lifted model from `z = lift(x)`: the joint
/// block moves by `P_q (A z + B u) - q`.
#[allow(clippy::too_many_arguments)]
pub fn phidot_row(
    model: &KoopmanModel,
    z: &DVector<f64>,
    sphere: &SphereGeometry,
    link: usize,
    obstacle: &Obstacle,
    obstacle_index: usize,
    index: &SafetyIndex,
    cfg: &SafetyBoundConfig,
) -> Result<Option<PhiDotRow>> {
    let prox = proximity(
        &sphere.center,
        sphere.radius,
        &obstacle.position,
        index,
        link,
        obstacle_index,
    )?;
    let SafetyBound::Bound(rhs) = safety_bound(prox.phi, cfg) else {
        return Ok(None);
    };
    let (input_map, drift) = lifted_displacement(model, z, &sphere.jacobian)?;
    Ok(Some(kinematic_row(
        &prox,
        &input_map,
        &drift,
        &obstacle.velocity,
        model.dt,
        rhs,
    )))
}

/// `(J P_q B, J (P_q A z - q))` for a sphere Jacobian `J`.
pub fn lifted_displacement(
    model: &KoopmanModel,
    z: &DVector<f64>,
    jacobian: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if z.len() != model.lifted_dim() {
        return Err(Error::dims("lifted state", model.lifted_dim(), z.len()));
    }
    let off = model.layout.joint_offset;
    let n = model.layout.joint_count;
    if jacobian.ncols() != n {
        return Err(Error::dims("sphere jacobian columns", n, jacobian.ncols()));
    }
    let bq = model.b.rows(off, n);
    let step = model.a.rows(off, n) * z - z.rows(off, n);
    Ok((jacobian * bq, jacobian * step))
}

/// Every active row for all spheres and obstacles at one configuration.
#[allow(clippy::too_many_arguments)]
pub fn koopman_rows(
    model: &KoopmanModel,
    chain: &SerialChain,
    x: &DVector<f64>,
    z: &DVector<f64>,
    obstacles: &[Obstacle],
    index: &SafetyIndex,
    cfg: &SafetyBoundConfig,
) -> Result<Vec<PhiDotRow>> {
    let q = x
        .rows(model.layout.joint_offset, model.layout.joint_count)
        .into_owned();
    let spheres = chain.sphere_geometry(&q)?;
    let mut rows = Vec::new();
    for (link, sphere) in spheres.iter().enumerate() {
        for (oi, obs) in obstacles.iter().enumerate() {
            if let Some(row) = phidot_row(model, z, sphere, link, obs, oi, index, cfg)? {
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn analytic_rows(
    chain: &SerialChain,
    q: &DVector<f64>,
    obstacles: &[Obstacle],
    index: &SafetyIndex,
    cfg: &SafetyBoundConfig,
    dt: f64,
) -> Result<Vec<PhiDotRow>> {
    let spheres = chain.sphere_geometry(q)?;
    let mut rows = Vec::new();
    for (link, sphere) in spheres.iter().enumerate() {
        for (oi, obs) in obstacles.iter().enumerate() {
            if let Some(row) = analytic_row(sphere, link, obs, oi, index, cfg, dt)? {
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Per-sphere worst signed distance `max_obs (d_min - d)` and the overall
/// minimum sphere–obstacle distance. With no obstacles every entry is
/// `-inf` and the distance is `+inf`.
pub fn clearance(
    spheres: &[SphereGeometry],
    obstacles: &[Obstacle],
    d_min: f64,
) -> (Vec<f64>, f64) {
    let mut min_dist = f64::INFINITY;
    let phis = spheres
        .iter()
        .map(|s| {
            obstacles
                .iter()
                .map(|o| {
                    let d = ((&s.center - &o.position).norm() - s.radius).max(0.0);
                    min_dist = min_dist.min(d);
                    d_min - d
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    (phis, min_dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::JointLayout;
    use crate::koopnet::ModelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn signed_distance_examples() {
        let o = v(&[0.0, 0.0]);
        assert_eq!(phi0(&v(&[0.2, 0.0]), &o, 0.2).unwrap(), 0.0);
        assert_relative_eq!(
            phi0(&v(&[0.0, 0.5]), &o, 0.2).unwrap(),
            -0.3,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            phi0(&v(&[0.1, 0.0]), &o, 0.2).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        assert!(matches!(phi0(&o, &o, 0.2), Err(Error::CoincidentPoints)));
    }

    #[test]
    fn index_examples() {
        let idx = SafetyIndex::new(1.7, 0.3, 0.2).unwrap();
        assert_relative_eq!(idx.value(0.2).unwrap(), 0.3 * 0.2, epsilon = 1e-15);
        assert!(idx.value(0.0).is_err());
        assert!(SafetyIndex::new(0.0, 0.0, 0.2).is_err());
        assert!(SafetyIndex::new(1.0, 0.0, -0.2).is_err());
    }

    #[test]
    fn slopes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let idx =
                SafetyIndex::new(rng.gen_range(0.1..4.0), rng.gen_range(-2.0..2.0), 0.2).unwrap();
            let d = rng.gen_range(0.05..1.5);
            let h = 1e-6;
            let fd = (idx.value(d + h).unwrap() - idx.value(d - h).unwrap()) / (2.0 * h);
            assert!((idx.slope(d) - fd).abs() < 1e-7);
            let hn = 1e-6;
            let sp = idx.with_params(idx.n + hn, idx.beta).unwrap().slope(d);
            let sm = idx.with_params(idx.n - hn, idx.beta).unwrap().slope(d);
            assert!((idx.slope_dn(d) - (sp - sm) / (2.0 * hn)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn unit_params_collapse_to_signed_distance(d in 1e-3f64..5.0, d_min in 0.05f64..1.0) {
            let idx = SafetyIndex::signed_distance(d_min).unwrap();
            let p = v(&[d, 0.0]);
            let expected = phi0(&p, &v(&[0.0, 0.0]), d_min).unwrap();
            prop_assert!((idx.value(d).unwrap() - expected).abs() < 1e-14);
        }

        #[test]
        fn decreasing_near_boundary(n in 0.1f64..4.0, frac in 0.0f64..0.99) {
            let d_min: f64 = 0.2;
            let beta = frac * n * d_min.powf(n - 1.0);
            let idx = SafetyIndex::new(n, beta, d_min).unwrap();
            prop_assert!(idx.slope(d_min) < 0.0);
            prop_assert!(idx.value(d_min * 1.001).unwrap() < idx.value(d_min * 0.999).unwrap());
        }
    }

    #[test]
    fn bound_branches() {
        let cfg = SafetyBoundConfig::default();
        assert_eq!(safety_bound(0.0, &cfg), SafetyBound::Bound(0.0));
        assert_eq!(safety_bound(0.05, &cfg), SafetyBound::Bound(-0.05));
        assert_eq!(safety_bound(-0.2, &cfg), SafetyBound::Bound(0.0));
        let narrow = SafetyBoundConfig {
            activation: 0.1,
            ..cfg
        };
        assert_eq!(safety_bound(-1.0, &narrow), SafetyBound::Inactive);
    }

    fn planar3() -> SerialChain {
        SerialChain::symmetric(
            JointLayout::PlanarZ,
            vec![0.5, 0.4, 0.3],
            vec![0.05; 3],
            1.0,
        )
        .unwrap()
    }

    fn spatial() -> SerialChain {
        SerialChain::symmetric(
            JointLayout::AlternatingZY,
            vec![0.3, 0.25, 0.2, 0.15],
            vec![0.04; 4],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn index_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = SafetyIndex::new(1.4, 0.1, 0.2).unwrap();
        for chain in [planar3(), spatial()] {
            let n = chain.joint_count();
            let w = chain.workspace_dim();
            for _ in 0..20 {
                let q = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
                let obs = DVector::from_fn(w, |_, _| rng.gen_range(-0.6..0.6));
                let phi_of = |q: &DVector<f64>, s: usize| {
                    let g = &chain.sphere_geometry(q).unwrap()[s];
                    proximity(&g.center, g.radius, &obs, &idx, s, 0)
                        .unwrap()
                        .phi
                };
                for s in 0..chain.sphere_count() {
                    let g = &chain.sphere_geometry(&q).unwrap()[s];
                    let prox = proximity(&g.center, g.radius, &obs, &idx, s, 0).unwrap();
                    let grad = g.jacobian.tr_mul(&prox.unit) * (-prox.slope);
                    for j in 0..n {
                        let h = 1e-6;
                        let mut qp = q.clone();
                        qp[j] += h;
                        let mut qm = q.clone();
                        qm[j] -= h;
                        let fd = (phi_of(&qp, s) - phi_of(&qm, s)) / (2.0 * h);
                        assert!((grad[j] - fd).abs() < 1e-6, "{} vs {fd}", grad[j]);
                    }
                }
            }
        }
    }

    fn arm_model(chain: &SerialChain, dt: f64, seed: u64) -> KoopmanModel {
        let mut spec = ModelSpec::for_arm(chain, dt, seed);
        spec.hidden = vec![6];
        spec.latent = 3;
        KoopmanModel::new(&spec).unwrap()
    }

    #[test]
    fn integrator_model_reduces_to_analytic_row() {
        let chain = planar3();
        let model = arm_model(&chain, 0.05, 1);
        let idx = SafetyIndex::new(1.0, 0.1, 0.2).unwrap();
        let cfg = SafetyBoundConfig::default();
        let q = v(&[0.3, -0.5, 0.8]);
        let x = crate::kinematics::PlantState::at_rest(&chain, q.clone())
            .unwrap()
            .to_vector();
        let z = model.lift(&x).unwrap();
        let obs = Obstacle {
            position: v(&[0.5, 0.3]),
            velocity: v(&[0.1, -0.2]),
        };
        let spheres = chain.sphere_geometry(&q).unwrap();
        for (s, g) in spheres.iter().enumerate() {
            let k = phidot_row(&model, &z, g, s, &obs, 0, &idx, &cfg).unwrap();
            let an = analytic_row(g, s, &obs, 0, &idx, &cfg, 0.05).unwrap();
            match (k, an) {
                (Some(k), Some(an)) => {
                    assert!((&k.a - &an.a).amax() < 1e-15);
                    assert!((k.c - an.c).abs() < 1e-15);
                    assert_eq!(k.rhs, an.rhs);
                }
                (None, None) => {}
                _ => panic!("activation differs"),
            }
        }
    }

    #[test]
    fn deep_interior_is_inactive() {
        let chain = planar3();
        let idx = SafetyIndex::signed_distance(0.2).unwrap();
        let rows = analytic_rows(
            &chain,
            &v(&[0.0, 0.0, 0.0]),
            &[Obstacle::fixed(v(&[-3.0, -3.0]))],
            &idx,
            &SafetyBoundConfig::default(),
            0.05,
        )
        .unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn row_matches_one_step_difference_of_the_surrogate() {
        // Small step so the first-order row is exact to within 1e-6 relative.
        let chain = spatial();
        let dt = 1e-5;
        let mut model = arm_model(&chain, dt, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = model.lifted_dim();
        model.a += DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0) * dt);
        model.b += DMatrix::from_fn(d, 4, |_, _| rng.gen_range(-0.2..0.2) * dt);
        let idx = SafetyIndex::new(1.5, -0.2, 0.2).unwrap();
        let cfg = SafetyBoundConfig {
            activation: 1e6,
            ..SafetyBoundConfig::default()
        };
        for _ in 0..20 {
            let q = DVector::from_fn(4, |_, _| rng.gen_range(-1.5..1.5));
            let x = crate::kinematics::PlantState::at_rest(&chain, q.clone())
                .unwrap()
                .to_vector();
            let z = model.lift(&x).unwrap();
            let obs = Obstacle {
                position: DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5)),
                velocity: DVector::from_fn(3, |_, _| rng.gen_range(-0.3..0.3)),
            };
            let u = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let next = model.project(&(&model.a * &z + &model.b * &u));
            // Central difference along the predicted one-step displacement.
            let step = next.rows(3, 4) - &q;
            let obs_step = &obs.velocity * dt;
            let now = chain.sphere_geometry(&q).unwrap();
            let fwd = chain.sphere_geometry(&(&q + &step)).unwrap();
            let back = chain.sphere_geometry(&(&q - &step)).unwrap();
            for s in 0..chain.sphere_count() {
                let row = phidot_row(&model, &z, &now[s], s, &obs, 0, &idx, &cfg)
                    .unwrap()
                    .unwrap();
                let p1 = proximity(
                    &fwd[s].center,
                    fwd[s].radius,
                    &(&obs.position + &obs_step),
                    &idx,
                    s,
                    0,
                )
                .unwrap()
                .phi;
                let p0 = proximity(
                    &back[s].center,
                    back[s].radius,
                    &(&obs.position - &obs_step),
                    &idx,
                    s,
                    0,
                )
                .unwrap()
                .phi;
                let fd = (p1 - p0) / (2.0 * dt);
                let rate = row.rate(&u);
                assert!(
                    (rate - fd).abs() / fd.abs().max(1e-3) < 1e-6,
                    "{rate} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn rows_are_affine_in_the_control() {
        let chain = planar3();
        let idx = SafetyIndex::signed_distance(0.2).unwrap();
        let obs = [Obstacle::fixed(v(&[0.6, 0.4]))];
        let rows = analytic_rows(
            &chain,
            &v(&[0.4, 0.3, -0.2]),
            &obs,
            &idx,
            &SafetyBoundConfig::default(),
            0.05,
        )
        .unwrap();
        assert!(!rows.is_empty());
        let u1 = v(&[0.3, -0.1, 0.5]);
        let u2 = v(&[-0.7, 0.2, 0.1]);
        for r in &rows {
            let base = r.rate(&DVector::zeros(3));
            let lhs = r.rate(&(&u1 * 2.0 + &u2 * 0.5)) - base;
            let rhs = 2.0 * (r.rate(&u1) - base) + 0.5 * (r.rate(&u2) - base);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
