//! Numerical simulators for the two chaotic systems and trajectory plumbing:
//! initial conditions, validity filtering, observation noise, and disk I/O.

mod kse;
mod l96;
mod rk4;
mod store;

pub use kse::{kse_auto_substeps, kse_rhs, KseParams, KseWorkspace};
pub use l96::{l96_rhs, L96Params};
pub use rk4::integrate_rk4;
pub use store::{read_trajectory, write_trajectory, TRAJECTORY_MAGIC};

use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;
use crate::types::ParamVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which system a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemId {
    L96,
    Kse,
}

impl std::fmt::Display for SystemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SystemId::L96 => write!(f, "l96"),
            SystemId::Kse => write!(f, "kse"),
        }
    }
}

/// State-space layout of a system instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "lowercase")]
pub enum SystemLayout {
    L96 {
        k_slow: usize,
        j_fast: usize,
    },
    Kse {
        dim: usize,
        half_period: f64,
    },
}

impl SystemLayout {
    pub fn state_dim(&self) -> usize {
        match *self {
            SystemLayout::L96 { k_slow, j_fast } => k_slow * (j_fast + 1),
            SystemLayout::Kse { dim, .. } => dim,
        }
    }

    pub fn system_id(&self) -> SystemId {
        match self {
            SystemLayout::L96 { .. } => SystemId::L96,
            SystemLayout::Kse { .. } => SystemId::Kse,
        }
    }

    /// Physical parameter dimension (`[F,h,c,b]` or `[l2,l4,lnl]`).
    pub fn param_dim(&self) -> usize {
        match self {
            SystemLayout::L96 { .. } => 4,
            SystemLayout::Kse { .. } => 3,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            SystemLayout::L96 { .. } => &["F", "h", "c", "b"],
            SystemLayout::Kse { .. } => &["lambda2", "lambda4", "lambda_nl"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub system: SystemId,
    pub params: Vec<f64>,
    pub seed: u64,
    pub filtered: bool,
}

/// A recorded `T x d` run of one of the systems.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: RowMatrix,
    pub dt: f64,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }
}

/// Why a trajectory was rejected by [`validate_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NonFinite,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

impl Validation {
    pub fn is_accept(&self) -> bool {
        matches!(self, Validation::Accept)
    }
}

/// Minimum overall standard deviation for a trajectory to count as dynamic.
pub const DEGENERACY_STD_THRESHOLD: f64 = 5e-5;

/// Accept a trajectory unless it contains non-finite values or the overall
/// standard deviation of its entries falls below [`DEGENERACY_STD_THRESHOLD`].
pub fn validate_trajectory(z: &Trajectory) -> Validation {
    let data = z.states.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Validation::Reject(RejectReason::NonFinite);
    }
    let n = data.len();
    if n == 0 {
        return Validation::Reject(RejectReason::Degenerate);
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if var.sqrt() < DEGENERACY_STD_THRESHOLD {
        Validation::Reject(RejectReason::Degenerate)
    } else {
        Validation::Accept
    }
}

/// Observation-noise model `eta ~ N(0, r * diag(gamma))` where `gamma` is the
/// per-channel temporal variance of the clean trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub r: f64,
    pub gamma_diag: Vec<f64>,
}

impl NoiseModel {
    pub fn estimate(z: &Trajectory, r: f64) -> Result<Self> {
        if r < 0.0 {
            return Err(CoreError::invalid("noise scale r must be >= 0"));
        }
        Ok(Self {
            r,
            gamma_diag: z.states.column_variances(),
        })
    }
}

/// Add channel-wise Gaussian observation noise with variance
/// `r * gamma_diag[channel]`; `r = 0` returns the input unchanged.
pub fn add_observation_noise(z: &Trajectory, r: f64, rng: &mut ChaCha12Rng) -> Result<Trajectory> {
    let model = NoiseModel::estimate(z, r)?;
    let mut out = z.clone();
    if r == 0.0 {
        return Ok(out);
    }
    let stds: Vec<f64> = model.gamma_diag.iter().map(|g| (r * g).sqrt()).collect();
    for i in 0..out.states.rows() {
        let row = out.states.row_mut(i);
        for (v, s) in row.iter_mut().zip(&stds) {
            let eta: f64 = rng.sample(StandardNormal);
            *v += s * eta;
        }
    }
    Ok(out)
}

/// Draw a random initial state: i.i.d. standard normal channels for L96,
/// i.i.d. uniform on `[-pi, pi]` for KSE.
pub fn sample_initial_condition(layout: &SystemLayout, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let d = layout.state_dim();
    match layout {
        SystemLayout::L96 { .. } => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        SystemLayout::Kse { .. } => (0..d)
            .map(|_| rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI))
            .collect(),
    }
}

/// Uniformly chosen row of an observed trajectory, used as the initial
/// condition for simulations inside EnKI evaluations.
pub fn ic_from_observation(z: &Trajectory, rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(CoreError::EmptyTrajectory);
    }
    let i = rng.gen_range(0..z.len());
    Ok(z.states.row(i).to_vec())
}

/// How many internal RK4 substeps to take per recorded interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Substeps {
    Fixed(usize),
    /// KSE only: derive the substep count from the linear stability bound.
    Auto,
}

/// Everything needed to run one simulation of either system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub layout: SystemLayout,
    pub dt: f64,
    pub substeps: Substeps,
    /// Recorded-interval units integrated and discarded before recording.
    pub burn_in: usize,
}

impl SimSpec {
    fn resolve_substeps(&self, params: &[f64]) -> Result<usize> {
        match (self.substeps, &self.layout) {
            (Substeps::Fixed(n), _) => {
                if n == 0 {
                    Err(CoreError::invalid("substeps must be >= 1"))
                } else {
                    Ok(n)
                }
            }
            (Substeps::Auto, SystemLayout::Kse { dim, half_period }) => {
                let p = KseParams::new(params[0], params[1], params[2])?;
                Ok(kse_auto_substeps(&p, *dim, *half_period, self.dt))
            }
            (Substeps::Auto, SystemLayout::L96 { .. }) => Err(CoreError::invalid(
                "auto substeps are only defined for the KSE stability rule",
            )),
        }
    }

    /// Integrate `steps` recorded intervals from the given initial condition.
    /// `seed` is recorded as metadata only.
    pub fn simulate(&self, params: &[f64], steps: usize, ic: &[f64], seed: u64) -> Result<Trajectory> {
        if params.len() != self.layout.param_dim() {
            return Err(CoreError::DimensionMismatch {
                what: "parameter vector",
                expected: self.layout.param_dim(),
                got: params.len(),
            });
        }
        let substeps = self.resolve_substeps(params)?;
        let states = match self.layout {
            SystemLayout::L96 { k_slow, j_fast } => {
                let p = L96Params::new(params[0], params[1], params[2], params[3])?;
                let rhs =
                    |state: &[f64], out: &mut [f64]| l96_rhs(state, &p, k_slow, j_fast, out);
                self.run(rhs, ic, steps, substeps)?
            }
            SystemLayout::Kse { dim, half_period } => {
                let p = KseParams::new(params[0], params[1], params[2])?;
                let mut ws = KseWorkspace::new(dim, half_period)?;
                let rhs = |state: &[f64], out: &mut [f64]| kse_rhs(state, &p, &mut ws, out);
                self.run(rhs, ic, steps, substeps)?
            }
        };
        Ok(Trajectory {
            states,
            dt: self.dt,
            meta: TrajectoryMeta {
                system: self.layout.system_id(),
                params: params.to_vec(),
                seed,
                filtered: false,
            },
        })
    }

    /// Sample an initial condition from `rng`, then simulate.
    pub fn simulate_from_rng(
        &self,
        params: &[f64],
        steps: usize,
        rng: &mut ChaCha12Rng,
        seed: u64,
    ) -> Result<Trajectory> {
        let ic = sample_initial_condition(&self.layout, rng);
        self.simulate(params, steps, &ic, seed)
    }

    fn run<F>(&self, mut rhs: F, ic: &[f64], steps: usize, substeps: usize) -> Result<RowMatrix>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<()>,
    {
        let start = if self.burn_in > 0 {
            let warm = integrate_rk4(&mut rhs, ic, self.dt, self.burn_in, substeps)?;
            warm.row(warm.rows() - 1).to_vec()
        } else {
            ic.to_vec()
        };
        integrate_rk4(&mut rhs, &start, self.dt, steps, substeps)
    }
}

/// Parameter vector for whichever system the layout describes.
pub fn param_vector(layout: &SystemLayout, values: &[f64]) -> Result<ParamVector> {
    if values.len() != layout.param_dim() {
        return Err(CoreError::DimensionMismatch {
            what: "parameter vector",
            expected: layout.param_dim(),
            got: values.len(),
        });
    }
    Ok(ParamVector::new(values.to_vec()))
}

#[cfg(test)]
mod tests;
