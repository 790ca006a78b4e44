//! Serial-chain robots: forward kinematics, position Jacobians, the
//! velocity-controlled plant used as ground truth, and training-data
//! generation.
//!
//! Every link carries one collision sphere centred at its midpoint; the
//! chain tip carries one more. Sphere `i < n` belongs to link `i`, sphere
//! `n` is the tip.

mod dataset;
mod plant;

pub use dataset::{sample_dataset, Dataset, Trajectory, CONTROL_HOLD_STEPS};
pub use plant::{Plant, PlantState};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint-axis arrangement of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointLayout {
    /// Every joint rotates about world Z; the chain lives in the XY plane.
    PlanarZ,
    /// Joints alternate Z, Y, Z, Y, ... in their local frames.
    AlternatingZY,
}

impl JointLayout {
    fn axis(self, joint: usize) -> Vector3<f64> {
        match self {
            JointLayout::PlanarZ => Vector3::z(),
            JointLayout::AlternatingZY if joint.is_multiple_of(2) => Vector3::z(),
            JointLayout::AlternatingZY => Vector3::y(),
        }
    }

    pub fn workspace_dim(self) -> usize {
        match self {
            JointLayout::PlanarZ => 2,
            JointLayout::AlternatingZY => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialChain {
    layout: JointLayout,
    link_lengths: Vec<f64>,
    collision_radii: Vec<f64>,
    u_min: Vec<f64>,
    u_max: Vec<f64>,
}

impl SerialChain {
    pub fn new(
        layout: JointLayout,
        link_lengths: Vec<f64>,
        collision_radii: Vec<f64>,
        u_min: Vec<f64>,
        u_max: Vec<f64>,
    ) -> Result<Self> {
        let n = link_lengths.len();
        if n < 2 {
            return Err(Error::param(format!(
                "chain needs at least 2 joints, got {n}"
            )));
        }
        for (what, v) in [
            ("collision_radii", &collision_radii),
            ("u_min", &u_min),
            ("u_max", &u_max),
        ] {
            if v.len() != n {
                return Err(Error::param(format!(
                    "{what} has {} entries, chain has {n} joints",
                    v.len()
                )));
            }
        }
        if link_lengths
            .iter()
            .chain(&collision_radii)
            .any(|&x| !(x.is_finite() && x > 0.0))
        {
            return Err(Error::param(
                "link lengths and radii must be finite and positive",
            ));
        }
        if u_min.iter().zip(&u_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::param(
                "velocity limits require u_min < u_max elementwise",
            ));
        }
        Ok(Self {
            layout,
            link_lengths,
            collision_radii,
            u_min,
            u_max,
        })
    }

    /// Chain with symmetric velocity limits `±velocity_limit` on every joint.
    pub fn symmetric(
        layout: JointLayout,
        link_lengths: Vec<f64>,
        collision_radii: Vec<f64>,
        velocity_limit: f64,
    ) -> Result<Self> {
        let n = link_lengths.len();
        Self::new(
            layout,
            link_lengths,
            collision_radii,
            vec![-velocity_limit; n],
            vec![velocity_limit; n],
        )
    }

    pub fn layout(&self) -> JointLayout {
        self.layout
    }

    pub fn joint_count(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn workspace_dim(&self) -> usize {
        self.layout.workspace_dim()
    }

    /// Length of the state `x = [p; q]`.
    pub fn state_dim(&self) -> usize {
        self.workspace_dim() + self.joint_count()
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    /// Collision spheres: one per link midpoint plus one at the tip.
    pub fn sphere_count(&self) -> usize {
        self.joint_count() + 1
    }

    pub fn sphere_radius(&self, sphere: usize) -> f64 {
        let n = self.joint_count();
        self.collision_radii[sphere.min(n - 1)]
    }

    pub fn u_min(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_min)
    }

    pub fn u_max(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_max)
    }

    /// Total length of the chain, the radius of the reachable workspace.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Copy of the chain with every link length multiplied by `factors[i]`.
    pub fn with_scaled_lengths(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.joint_count() {
            return Err(Error::dims(
                "length scale factors",
                self.joint_count(),
                factors.len(),
            ));
        }
        let lengths = self
            .link_lengths
            .iter()
            .zip(factors)
            .map(|(l, f)| l * f)
            .collect();
        Self::new(
            self.layout,
            lengths,
            self.collision_radii.clone(),
            self.u_min.clone(),
            self.u_max.clone(),
        )
    }

    pub fn clamp_control(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.u_min.iter().zip(&self.u_max))
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi)),
        )
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.joint_count() {
            return Err(Error::dims("joint vector", self.joint_count(), q.len()));
        }
        Ok(())
    }

    /// World frames of the chain in 3D: joint origins, link rotations and
    /// joint axes.
    pub fn frames(&self, q: &DVector<f64>) -> Result<ChainFrames> {
        self.check_q(q)?;
        let n = self.joint_count();
        let mut origins = Vec::with_capacity(n + 1);
        let mut rotations = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        let mut rot = Matrix3::identity();
        let mut origin = Vector3::zeros();
        for j in 0..n {
            let local = self.layout.axis(j);
            axes.push(rot * local);
            rot *= axis_rotation(local, q[j]);
            origins.push(origin);
            rotations.push(rot);
            origin += rot * Vector3::new(self.link_lengths[j], 0.0, 0.0);
        }
        origins.push(origin);
        Ok(ChainFrames {
            origins,
            rotations,
            axes,
        })
    }

    /// Collision-sphere centres (link midpoints, then the tip), each of
    /// workspace dimension.
    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let frames = self.frames(q)?;
        Ok((0..self.sphere_count())
            .map(|s| self.project(&frames.sphere_center(s, &self.link_lengths)))
            .collect())
    }

    /// Tip position, the tracked point of the state.
    pub fn tip(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let frames = self.frames(q)?;
        Ok(self.project(&frames.origins[self.joint_count()]))
    }

    /// ∂(sphere centre)/∂q, a `w × n` matrix. Columns of joints distal to
    /// the sphere's link are exactly zero.
    pub fn position_jacobian(&self, q: &DVector<f64>, sphere: usize) -> Result<DMatrix<f64>> {
        if sphere >= self.sphere_count() {
            return Err(Error::IndexOutOfRange {
                index: sphere,
                len: self.sphere_count(),
            });
        }
        let frames = self.frames(q)?;
        Ok(self.jacobian_from_frames(&frames, sphere))
    }

    pub(crate) fn jacobian_from_frames(&self, frames: &ChainFrames, sphere: usize) -> DMatrix<f64> {
        let n = self.joint_count();
        let w = self.workspace_dim();
        let center = frames.sphere_center(sphere, &self.link_lengths);
        let last_joint = sphere.min(n - 1);
        let mut jac = DMatrix::zeros(w, n);
        for j in 0..=last_joint {
            let col = frames.axes[j].cross(&(center - frames.origins[j]));
            for r in 0..w {
                jac[(r, j)] = col[r];
            }
        }
        jac
    }

    /// Centres and Jacobians of every collision sphere in one pass.
    pub fn sphere_geometry(&self, q: &DVector<f64>) -> Result<Vec<SphereGeometry>> {
        let frames = self.frames(q)?;
        Ok((0..self.sphere_count())
            .map(|s| SphereGeometry {
                center: self.project(&frames.sphere_center(s, &self.link_lengths)),
                radius: self.sphere_radius(s),
                jacobian: self.jacobian_from_frames(&frames, s),
            })
            .collect())
    }

    fn project(&self, p: &Vector3<f64>) -> DVector<f64> {
        DVector::from_column_slice(&p.as_slice()[..self.workspace_dim()])
    }
}

/// World-frame data of one chain configuration.
#[derive(Debug, Clone)]
pub struct ChainFrames {
    /// Joint origins followed by the tip (n + 1 points).
    pub origins: Vec<Vector3<f64>>,
    /// Orientation of each link after its joint rotation.
    pub rotations: Vec<Matrix3<f64>>,
    /// World rotation axis of each joint.
    pub axes: Vec<Vector3<f64>>,
}

impl ChainFrames {
    fn sphere_center(&self, sphere: usize, lengths: &[f64]) -> Vector3<f64> {
        let n = lengths.len();
        if sphere >= n {
            self.origins[n]
        } else {
            self.origins[sphere]
                + self.rotations[sphere] * Vector3::new(0.5 * lengths[sphere], 0.0, 0.0)
        }
    }
}

/// A collision sphere evaluated at one configuration.
#[derive(Debug, Clone)]
pub struct SphereGeometry {
    pub center: DVector<f64>,
    pub radius: f64,
    pub jacobian: DMatrix<f64>,
}

fn axis_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    if axis.z == 1.0 {
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    } else {
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }
}
