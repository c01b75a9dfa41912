//! Ensemble Kalman Inversion over pluggable forward models.
//!
//! Particles live in working coordinates: log-normal components are stored
//! and updated as logarithms, which keeps the Gaussian analysis step
//! internally consistent and the physical value positive. Forward models
//! are evaluated at the exponentiated (physical) point. Particles whose
//! forward evaluation fails keep their value for that iteration and are
//! excluded from the empirical covariances.

use crate::dynamics::{ic_from_observation, validate_trajectory, SimSpec, Trajectory};
use crate::error::{CoreError, Result};
use crate::features::moments;
use crate::graph::Tensor;
use crate::linalg::RowMatrix;
use crate::nn::{Emulator, Standardizer};
use crate::rng::{derive_rng, tag};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Normal,
    LogNormal,
}

/// One independent prior component. For `LogNormal`, `mean` and `variance`
/// describe the distribution of the logarithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorComponent {
    pub name: String,
    pub kind: PriorKind,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub components: Vec<PriorComponent>,
}

impl Prior {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(CoreError::config("prior has no components"));
        }
        for c in &self.components {
            if !(c.variance.is_finite() && c.variance > 0.0) || !c.mean.is_finite() {
                return Err(CoreError::config(format!(
                    "prior component {} needs finite mean and positive variance",
                    c.name
                )));
            }
        }
        Ok(())
    }

    /// Map a working-coordinate point to physical space.
    pub fn to_physical(&self, working: &[f64]) -> Vec<f64> {
        working
            .iter()
            .zip(&self.components)
            .map(|(v, c)| match c.kind {
                PriorKind::Normal => *v,
                PriorKind::LogNormal => v.exp(),
            })
            .collect()
    }

    /// Map a physical point to working coordinates.
    pub fn to_working(&self, physical: &[f64]) -> Vec<f64> {
        physical
            .iter()
            .zip(&self.components)
            .map(|(v, c)| match c.kind {
                PriorKind::Normal => *v,
                PriorKind::LogNormal => v.ln(),
            })
            .collect()
    }

    /// Fixed L96 prior: broad normals on `(F, h, b)` and a log-normal on `c`.
    pub fn l96_fixed() -> Self {
        Prior {
            components: vec![
                PriorComponent {
                    name: "F".into(),
                    kind: PriorKind::Normal,
                    mean: 7.5,
                    variance: 36.0,
                },
                PriorComponent {
                    name: "h".into(),
                    kind: PriorKind::Normal,
                    mean: 2.5,
                    variance: 2.25,
                },
                PriorComponent {
                    name: "c".into(),
                    kind: PriorKind::LogNormal,
                    mean: 11.5_f64.ln(),
                    variance: 0.15,
                },
                PriorComponent {
                    name: "b".into(),
                    kind: PriorKind::Normal,
                    mean: 12.5,
                    variance: 36.0,
                },
            ],
        }
    }

    /// Empirical-Bayes variances paired with [`Prior::l96_fixed`].
    pub fn l96_empb_variances() -> Vec<f64> {
        vec![18.0, 1.125, 0.075, 18.0]
    }

    /// Fixed KSE prior: same broad normal on every coefficient.
    pub fn kse_fixed() -> Self {
        Prior {
            components: ["lambda2", "lambda4", "lambda_nl"]
                .into_iter()
                .map(|name| PriorComponent {
                    name: name.into(),
                    kind: PriorKind::Normal,
                    mean: 5.0,
                    variance: 6.25,
                })
                .collect(),
        }
    }

    pub fn kse_empb_variances() -> Vec<f64> {
        vec![6.25; 3]
    }
}

/// Particles in working coordinates plus an iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: RowMatrix,
    pub iteration: usize,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.particles.rows()
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    pub fn mean_working(&self) -> Vec<f64> {
        self.particles.column_means()
    }

    pub fn mean_physical(&self, prior: &Prior) -> Vec<f64> {
        // Mean of physical-space particles, not the transform of the mean.
        let k = self.dim();
        let mut acc = vec![0.0; k];
        for m in 0..self.size() {
            for (a, v) in acc.iter_mut().zip(prior.to_physical(self.particles.row(m))) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= self.size() as f64;
        }
        acc
    }

    /// Trace of the empirical covariance in working coordinates.
    pub fn spread(&self) -> f64 {
        self.particles.column_variances().iter().sum()
    }

    /// Particles mapped to physical space, row per particle.
    pub fn physical(&self, prior: &Prior) -> RowMatrix {
        let rows: Vec<Vec<f64>> = (0..self.size())
            .map(|m| prior.to_physical(self.particles.row(m)))
            .collect();
        RowMatrix::from_rows(&rows)
    }
}

/// Draw the initial ensemble from the prior (log-normal components are
/// sampled as normals in log space).
pub fn sample_prior(prior: &Prior, ensemble_size: usize, rng: &mut ChaCha12Rng) -> Result<Ensemble> {
    prior.validate()?;
    if ensemble_size < 2 {
        return Err(CoreError::invalid("ensemble size must be >= 2"));
    }
    let k = prior.dim();
    let mut particles = RowMatrix::zeros(ensemble_size, k);
    for m in 0..ensemble_size {
        let row = particles.row_mut(m);
        for (j, c) in prior.components.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            row[j] = c.mean + z * c.variance.sqrt();
        }
    }
    Ok(Ensemble {
        particles,
        iteration: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnkiConfig {
    /// Ensemble size M.
    pub ensemble_size: usize,
    /// Iteration count N.
    pub iterations: usize,
    /// Step size alpha.
    pub step_size: f64,
    /// Diagonal of the observation covariance R.
    pub obs_variance: Vec<f64>,
}

impl EnkiConfig {
    /// `iterations = 0` is accepted and means "return the prior ensemble";
    /// pipeline-level configs additionally require at least one iteration.
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(CoreError::config("ensemble size must be >= 2"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(CoreError::config("step size must be positive"));
        }
        if self.obs_variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CoreError::config("observation variances must be positive"));
        }
        Ok(())
    }
}

/// A map from physical parameters to observation space. `None` signals a
/// failed evaluation (diverged simulation, invalid parameter point).
pub trait ForwardModel: Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, phi_physical: &[f64], rng: &mut ChaCha12Rng) -> Option<Vec<f64>>;
}

/// Classical baseline: simulate, then reduce to the moment vector. Initial
/// conditions are drawn uniformly from the rows of the observation.
pub struct MomentForward {
    pub sim: SimSpec,
    pub sim_len: usize,
    pub observation: Trajectory,
}

impl MomentForward {
    pub fn output_dim_for(sim: &SimSpec) -> usize {
        match sim.layout {
            crate::dynamics::SystemLayout::L96 { k_slow, .. } => 5 * k_slow,
            crate::dynamics::SystemLayout::Kse { dim, .. } => dim,
        }
    }
}

impl ForwardModel for MomentForward {
    fn output_dim(&self) -> usize {
        Self::output_dim_for(&self.sim)
    }

    fn eval(&self, phi: &[f64], rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        let ic = ic_from_observation(&self.observation, rng).ok()?;
        let z = self.sim.simulate(phi, self.sim_len, &ic, 0).ok()?;
        if !validate_trajectory(&z).is_accept() {
            return None;
        }
        moments(&z.states, &self.sim.layout).ok().map(|m| m.0)
    }
}

/// Learned surrogate: standardize the parameter point and run the emulator.
pub struct EmulatorForward {
    pub emulator: Emulator,
    pub param_norm: Standardizer,
}

impl ForwardModel for EmulatorForward {
    fn output_dim(&self) -> usize {
        self.emulator.spec.embed_dim
    }

    fn eval(&self, phi: &[f64], _rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        if phi.len() != self.emulator.spec.param_dim || phi.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let z = self.param_norm.apply_vec(phi);
        let input = Tensor::from_vec(&[1, phi.len()], z);
        self.emulator.infer(&input).ok().map(|t| t.data().to_vec())
    }
}

/// Half squared Mahalanobis distance under a diagonal covariance.
pub fn mahalanobis_half(y: &[f64], g: &[f64], var_diag: &[f64]) -> f64 {
    y.iter()
        .zip(g)
        .zip(var_diag)
        .map(|((yv, gv), var)| {
            let r = yv - gv;
            0.5 * r * r / var
        })
        .sum()
}

/// Moment-matching objective at a physical parameter point; `+inf` when the
/// simulation is rejected so the point is effectively repelled.
pub fn moment_objective(
    fm: &MomentForward,
    phi: &[f64],
    y_moments: &[f64],
    var_diag: &[f64],
    rng: &mut ChaCha12Rng,
) -> f64 {
    match fm.eval(phi, rng) {
        Some(g) => mahalanobis_half(y_moments, &g, var_diag),
        None => f64::INFINITY,
    }
}

/// Squared distance between the emulator's embedding of `phi` and the
/// observed trajectory embedding. For unit vectors this lies in `[0, 4]`;
/// the clamp only trims float round-off at the boundary.
pub fn emulator_objective(fm: &EmulatorForward, phi: &[f64], z_embedding: &[f64]) -> f64 {
    match fm.eval(phi, &mut derive_rng(0, &[])) {
        Some(g) => embedding_distance_sq(&g, z_embedding),
        None => f64::INFINITY,
    }
}

/// `||a - b||^2` clamped to the unit-sphere bound `[0, 4]`.
pub fn embedding_distance_sq(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d.clamp(0.0, 4.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Ensemble mean in physical space.
    pub mean: Vec<f64>,
    /// Trace of the working-coordinate covariance.
    pub spread: f64,
    /// Objective value at the ensemble mean (`+inf` if the forward model
    /// failed there).
    pub objective: f64,
    /// Particles with successful forward evaluations this iteration.
    pub valid: usize,
}

pub struct EnkiRun {
    pub ensemble: Ensemble,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// `(iteration, particles in physical space)` snapshots.
    pub snapshots: Vec<(usize, RowMatrix)>,
}

fn objective_at_mean(
    fm: &dyn ForwardModel,
    y: &[f64],
    var_diag: &[f64],
    mean_physical: &[f64],
    seed: u64,
    iteration: usize,
) -> f64 {
    let mut rng = derive_rng(seed, &[tag::ENKI_FORWARD, iteration as u64, u64::MAX]);
    match fm.eval(mean_physical, &mut rng) {
        Some(g) => mahalanobis_half(y, &g, var_diag),
        None => f64::INFINITY,
    }
}

/// One prediction + analysis step. `seed` and the ensemble's iteration
/// counter derive the per-particle noise streams, so parallel and serial
/// execution agree bit-for-bit.
pub fn enki_step(
    ens: &Ensemble,
    fm: &dyn ForwardModel,
    y: &[f64],
    cfg: &EnkiConfig,
    seed: u64,
) -> Result<(Ensemble, usize)> {
    cfg.validate()?;
    let q = fm.output_dim();
    if y.len() != q {
        return Err(CoreError::DimensionMismatch {
            what: "observation vector",
            expected: q,
            got: y.len(),
        });
    }
    if cfg.obs_variance.len() != q {
        return Err(CoreError::DimensionMismatch {
            what: "observation variance diagonal",
            expected: q,
            got: cfg.obs_variance.len(),
        });
    }
    let m_total = ens.size();
    let k = ens.dim();
    let iter_tag = ens.iteration as u64;

    // Prediction step: forward model on every particle, in parallel with
    // per-particle derived RNG streams. `fm` sees particle coordinates as
    // stored; `run_enki` wraps physical-space models with the prior's
    // coordinate map.
    let evals: Vec<Option<Vec<f64>>> = (0..m_total)
        .into_par_iter()
        .map(|m| {
            let mut rng = derive_rng(seed, &[tag::ENKI_FORWARD, iter_tag, m as u64]);
            fm.eval(ens.particles.row(m), &mut rng)
        })
        .collect();

    let valid: Vec<usize> = (0..m_total).filter(|m| evals[*m].is_some()).collect();
    if valid.len() < 2 {
        return Err(CoreError::numerical(format!(
            "only {} of {m_total} forward evaluations succeeded",
            valid.len()
        )));
    }

    let nv = valid.len() as f64;
    let mut phi_mean = vec![0.0; k];
    let mut g_mean = vec![0.0; q];
    for &m in &valid {
        for (a, &v) in phi_mean.iter_mut().zip(ens.particles.row(m)) {
            *a += v;
        }
        for (a, &v) in g_mean.iter_mut().zip(evals[m].as_ref().unwrap()) {
            *a += v;
        }
    }
    for a in &mut phi_mean {
        *a /= nv;
    }
    for a in &mut g_mean {
        *a /= nv;
    }

    let mut c_pg = DMatrix::<f64>::zeros(k, q);
    let mut c_gg = DMatrix::<f64>::zeros(q, q);
    for &m in &valid {
        let dp: Vec<f64> = ens
            .particles
            .row(m)
            .iter()
            .zip(&phi_mean)
            .map(|(v, mu)| v - mu)
            .collect();
        let dg: Vec<f64> = evals[m]
            .as_ref()
            .unwrap()
            .iter()
            .zip(&g_mean)
            .map(|(v, mu)| v - mu)
            .collect();
        for i in 0..k {
            for j in 0..q {
                c_pg[(i, j)] += dp[i] * dg[j];
            }
        }
        for i in 0..q {
            for j in 0..=i {
                c_gg[(i, j)] += dg[i] * dg[j];
            }
        }
    }
    c_pg /= nv;
    for i in 0..q {
        for j in 0..=i {
            c_gg[(i, j)] /= nv;
            c_gg[(j, i)] = c_gg[(i, j)];
        }
    }

    let inv_alpha = 1.0 / cfg.step_size;
    let mut a = c_gg.clone();
    for j in 0..q {
        a[(j, j)] += inv_alpha * cfg.obs_variance[j];
    }

    let chol = match nalgebra::Cholesky::new(a.clone()) {
        Some(c) => c,
        None => {
            // C_gg is rank-deficient when the valid count is below q; a tiny
            // diagonal jitter restores positive definiteness.
            let jitter = 1e-10 * a.trace() / q as f64;
            for j in 0..q {
                a[(j, j)] += jitter;
            }
            nalgebra::Cholesky::new(a).ok_or_else(|| {
                CoreError::numerical("C_gg + R/alpha is singular beyond jitter tolerance")
            })?
        }
    };
    // K = C_pg (C_gg + R/alpha)^-1, computed as (A^-1 C_pg^T)^T for SPD A.
    let gain = chol.solve(&c_pg.transpose()).transpose();

    let noise_stds: Vec<f64> = cfg
        .obs_variance
        .iter()
        .map(|v| (v * inv_alpha).sqrt())
        .collect();

    let mut next = ens.particles.clone();
    for &m in &valid {
        let mut rng = derive_rng(seed, &[tag::ENKI_PERTURB, iter_tag, m as u64]);
        let g_m = evals[m].as_ref().unwrap();
        let mut innovation = vec![0.0; q];
        for j in 0..q {
            let eta: f64 = rng.sample(StandardNormal);
            innovation[j] = y[j] + noise_stds[j] * eta - g_m[j];
        }
        let row = next.row_mut(m);
        for i in 0..k {
            let mut upd = 0.0;
            for j in 0..q {
                upd += gain[(i, j)] * innovation[j];
            }
            row[i] += upd;
        }
    }

    Ok((
        Ensemble {
            particles: next,
            iteration: ens.iteration + 1,
        },
        valid.len(),
    ))
}

/// Full inversion loop: sample the prior, iterate [`enki_step`], collect
/// diagnostics and (optionally strided) physical-space snapshots.
/// `snapshot_every = 0` keeps only the initial and final ensembles.
pub fn run_enki(
    y: &[f64],
    fm: &dyn ForwardModel,
    prior: &Prior,
    cfg: &EnkiConfig,
    seed: u64,
    snapshot_every: usize,
) -> Result<EnkiRun> {
    cfg.validate()?;
    prior.validate()?;
    let mut rng = derive_rng(seed, &[tag::ENKI_PRIOR]);
    let ens = sample_prior(prior, cfg.ensemble_size, &mut rng)?;
    run_enki_from(ens, y, fm, prior, cfg, seed, snapshot_every)
}

/// Iterate from an existing ensemble (used by tests and warm starts).
pub fn run_enki_from(
    mut working: Ensemble,
    y: &[f64],
    fm: &dyn ForwardModel,
    prior: &Prior,
    cfg: &EnkiConfig,
    seed: u64,
    snapshot_every: usize,
) -> Result<EnkiRun> {
    // The step operates in working coordinates but forward models take
    // physical points, so wrap the model with the coordinate map.
    struct PhysicalWrap<'a> {
        inner: &'a dyn ForwardModel,
        prior: &'a Prior,
    }
    impl ForwardModel for PhysicalWrap<'_> {
        fn output_dim(&self) -> usize {
            self.inner.output_dim()
        }
        fn eval(&self, working: &[f64], rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
            let phys = self.prior.to_physical(working);
            if phys.iter().any(|v| !v.is_finite()) {
                return None;
            }
            self.inner.eval(&phys, rng)
        }
    }
    let wrapped = PhysicalWrap { inner: fm, prior };

    let mut diagnostics = Vec::with_capacity(cfg.iterations + 1);
    let mut snapshots = Vec::new();
    let record = |ens: &Ensemble, snaps: &mut Vec<(usize, RowMatrix)>| {
        let at_end = ens.iteration == cfg.iterations;
        let strided = snapshot_every > 0 && ens.iteration % snapshot_every == 0;
        if ens.iteration == 0 || at_end || strided {
            snaps.push((ens.iteration, ens.physical(prior)));
        }
    };

    let mean0 = working.mean_physical(prior);
    diagnostics.push(IterationDiagnostics {
        iteration: 0,
        spread: working.spread(),
        objective: objective_at_mean(&wrapped, y, &cfg.obs_variance, &prior.to_working(&mean0), seed, 0),
        mean: mean0,
        valid: working.size(),
    });
    record(&working, &mut snapshots);

    for _ in 0..cfg.iterations {
        let (next, valid) = enki_step(&working, &wrapped, y, cfg, seed)?;
        working = next;
        let mean = working.mean_physical(prior);
        diagnostics.push(IterationDiagnostics {
            iteration: working.iteration,
            spread: working.spread(),
            objective: objective_at_mean(
                &wrapped,
                y,
                &cfg.obs_variance,
                &prior.to_working(&mean),
                seed,
                working.iteration,
            ),
            mean,
            valid,
        });
        record(&working, &mut snapshots);
    }

    Ok(EnkiRun {
        ensemble: working,
        diagnostics,
        snapshots,
    })
}

/// Instance-wise prior: the fixed template with its means replaced by the
/// regression estimate (log-transformed for log-normal components) and its
/// variances replaced by the empirical-Bayes values. Returns a flag when a
/// non-positive estimate had to be clamped for a log-normal component.
pub fn empirical_bayes_prior(
    estimate: &[f64],
    template: &Prior,
    variances: &[f64],
) -> Result<(Prior, bool)> {
    if estimate.len() != template.dim() || variances.len() != template.dim() {
        return Err(CoreError::DimensionMismatch {
            what: "empirical Bayes prior",
            expected: template.dim(),
            got: estimate.len(),
        });
    }
    const POSITIVE_FLOOR: f64 = 1e-3;
    let mut clamped = false;
    let components = template
        .components
        .iter()
        .zip(estimate)
        .zip(variances)
        .map(|((c, &est), &var)| {
            let mean = match c.kind {
                PriorKind::Normal => est,
                PriorKind::LogNormal => {
                    let safe = if est <= 0.0 {
                        clamped = true;
                        POSITIVE_FLOOR
                    } else {
                        est
                    };
                    safe.ln()
                }
            };
            PriorComponent {
                name: c.name.clone(),
                kind: c.kind,
                mean,
                variance: var,
            }
        })
        .collect();
    let prior = Prior { components };
    prior.validate()?;
    Ok((prior, clamped))
}
