use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{Dense, LiftingNetwork};
use crate::error::{Error, Result};
use crate::kinematics::{SerialChain, Trajectory};

/// Where the joint block sits inside the original state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub dim: usize,
    pub joint_offset: usize,
    pub joint_count: usize,
}

impl StateLayout {
    /// Fixed-base arm state `[p; q]`.
    pub fn arm(chain: &SerialChain) -> Self {
        Self {
            dim: chain.state_dim(),
            joint_offset: chain.workspace_dim(),
            joint_count: chain.joint_count(),
        }
    }

    /// Joint angles only.
    pub fn joints_only(n: usize) -> Self {
        Self {
            dim: n,
            joint_offset: 0,
            joint_count: n,
        }
    }
}

/// Shape and initialisation of a fresh model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layout: StateLayout,
    pub control_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub dt: f64,
    /// `(state_row, control)` pairs integrated as `x_row += dt * u_control`
    /// by the initial operator.
    pub integrators: Vec<(usize, usize)>,
    pub seed: u64,
}

impl ModelSpec {
    /// Desk-scale defaults for an arm: hidden `[64, 64]`, 16 latent
    /// coordinates, joint block integrating the joint-velocity command.
    pub fn for_arm(chain: &SerialChain, dt: f64, seed: u64) -> Self {
        let layout = StateLayout::arm(chain);
        Self {
            layout,
            control_dim: chain.joint_count(),
            hidden: vec![64, 64],
            latent: 16,
            dt,
            integrators: (0..chain.joint_count())
                .map(|j| (layout.joint_offset + j, j))
                .collect(),
            seed,
        }
    }
}

/// Learned surrogate `z' = A z + B u` on the lifted state `z = [x; ψ(x)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub net: LiftingNetwork,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Standardisation of the network input: `(x - mean) / scale`.
    pub norm_mean: DVector<f64>,
    pub norm_scale: DVector<f64>,
    pub dt: f64,
    pub layout: StateLayout,
    pub chain: Option<SerialChain>,
}

impl KoopmanModel {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let nx = spec.layout.dim;
        let dim = nx + spec.latent;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let net = LiftingNetwork::new(nx, &spec.hidden, spec.latent, &mut rng);
        let mut b = DMatrix::zeros(dim, spec.control_dim);
        for &(row, col) in &spec.integrators {
            if row >= nx || col >= spec.control_dim {
                return Err(Error::param(format!(
                    "integrator ({row}, {col}) out of range"
                )));
            }
            b[(row, col)] = spec.dt;
        }
        Ok(Self {
            net,
            a: DMatrix::identity(dim, dim),
            b,
            norm_mean: DVector::zeros(nx),
            norm_scale: DVector::from_element(nx, 1.0),
            dt: spec.dt,
            layout: spec.layout,
            chain: None,
        })
    }

    pub fn with_chain(mut self, chain: SerialChain) -> Self {
        self.chain = Some(chain);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.layout.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Sets the input standardisation from the states of `data`.
    pub fn fit_standardization(&mut self, data: &[Trajectory]) {
        let nx = self.state_dim();
        let mut count = 0.0;
        let mut sum = DVector::zeros(nx);
        let mut sq = DVector::zeros(nx);
        for x in data.iter().flat_map(|t| t.states.iter()) {
            count += 1.0;
            sum += x;
            sq += x.component_mul(x);
        }
        if count == 0.0 {
            return;
        }
        let mean = sum / count;
        let var = sq / count - mean.component_mul(&mean);
        self.norm_scale = var.map(|v| v.max(0.0).sqrt().max(1e-6));
        self.norm_mean = mean;
    }

    pub(crate) fn standardize(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.norm_mean).component_div(&self.norm_scale)
    }

    pub(crate) fn standardize_batch(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut s = xs.clone();
        for mut col in s.column_iter_mut() {
            col -= &self.norm_mean;
            col.component_div_assign(&self.norm_scale);
        }
        s
    }

    /// `z = [x; ψ(x)]`; the leading block is `x` bit for bit.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let nx = self.state_dim();
        if x.len() != nx {
            return Err(Error::dims("lift input", nx, x.len()));
        }
        let psi = self.net.forward(&self.standardize(x));
        let mut z = DVector::zeros(self.lifted_dim());
        z.rows_mut(0, nx).copy_from(x);
        z.rows_mut(nx, psi.len()).copy_from(&psi);
        Ok(z)
    }

    /// ∂z/∂x.
    pub fn lift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let nx = self.state_dim();
        if x.len() != nx {
            return Err(Error::dims("lift input", nx, x.len()));
        }
        let mut jac = DMatrix::zeros(self.lifted_dim(), nx);
        jac.view_mut((0, 0), (nx, nx)).fill_with_identity();
        let mut inner = self.net.input_jacobian(&self.standardize(x));
        for (c, s) in self.norm_scale.iter().enumerate() {
            inner.column_mut(c).unscale_mut(*s);
        }
        jac.view_mut((nx, 0), (inner.nrows(), nx)).copy_from(&inner);
        Ok(jac)
    }

    /// `P z`: the original state block of a lifted vector.
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(0, self.state_dim()).into_owned()
    }

    /// Open-loop `z_{k+1} = A z_k + B u_k` without re-lifting.
    pub fn rollout(
        &self,
        z0: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if z0.len() != self.lifted_dim() {
            return Err(Error::dims(
                "rollout initial state",
                self.lifted_dim(),
                z0.len(),
            ));
        }
        let mut out = Vec::with_capacity(controls.len());
        let mut z = z0.clone();
        for u in controls {
            if u.len() != self.control_dim() {
                return Err(Error::dims("rollout control", self.control_dim(), u.len()));
            }
            z = &self.a * z + &self.b * u;
            out.push(z.clone());
        }
        Ok(out)
    }

    /// One-step prediction of the original state.
    pub fn predict_state(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.lift(x)?;
        let next = self.rollout(&z, std::slice::from_ref(u))?;
        Ok(self.project(&next[0]))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.display().to_string(),
                detail: j.to_string(),
            },
            other => other,
        })
    }
}

const MODEL_FORMAT: &str = "koopsafe-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayFile {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl ArrayFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::dims(
                "model array",
                self.rows * self.cols,
                self.data.len(),
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weight: ArrayFile,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dt: f64,
    layout: StateLayout,
    chain: Option<SerialChain>,
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    layer_widths: Vec<usize>,
    layers: Vec<LayerFile>,
    a: ArrayFile,
    b: ArrayFile,
}

impl ModelFile {
    fn from_model(m: &KoopmanModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dt: m.dt,
            layout: m.layout,
            chain: m.chain.clone(),
            norm_mean: m.norm_mean.as_slice().to_vec(),
            norm_scale: m.norm_scale.as_slice().to_vec(),
            layer_widths: m.net.widths(),
            layers: m
                .net
                .layers
                .iter()
                .map(|l| LayerFile {
                    weight: ArrayFile::from_matrix(&l.weight),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
            a: ArrayFile::from_matrix(&m.a),
            b: ArrayFile::from_matrix(&m.b),
        }
    }

    fn into_model(self) -> Result<KoopmanModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::param(format!(
                "unsupported model file {} v{}",
                self.format, self.version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(Dense {
                    weight: l.weight.to_matrix()?,
                    bias: DVector::from_vec(l.bias.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = LiftingNetwork { layers };
        if net.widths() != self.layer_widths {
            return Err(Error::param("layer shapes do not chain"));
        }
        let model = KoopmanModel {
            net,
            a: self.a.to_matrix()?,
            b: self.b.to_matrix()?,
            norm_mean: DVector::from_vec(self.norm_mean),
            norm_scale: DVector::from_vec(self.norm_scale),
            dt: self.dt,
            layout: self.layout,
            chain: self.chain,
        };
        let d = model.state_dim() + model.latent_dim();
        if model.a.shape() != (d, d)
            || model.b.nrows() != d
            || model.net.input_dim() != model.state_dim()
        {
            return Err(Error::param("model operator shapes are inconsistent"));
        }
        Ok(model)
    }
}
