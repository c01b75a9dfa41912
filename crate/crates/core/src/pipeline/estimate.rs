//! Parameter estimation from observed trajectories, in three modes: the
//! moment-matching baseline, the learned-emulator inversion, and the plain
//! regression head.

use super::config::{PriorChoice, RunConfig};
use super::dataset::load_manifest;
use super::train::{embedding_estimate, head_estimate};
use crate::dynamics::{read_trajectory, Trajectory};
use crate::enki::{
    empirical_bayes_prior, run_enki, EmulatorForward, EnkiConfig, IterationDiagnostics,
    MomentForward,
};
use crate::error::{CoreError, Result};
use crate::features::{crop, moment_variance, moment_variance_of_blocks, moments};
use crate::linalg::RowMatrix;
use crate::nn::Checkpoint;
use crate::rng::{derive_rng, derive_seed, tag};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    /// EnKI with the simulator-backed moment objective and the fixed prior.
    Baseline,
    /// Regression-head point estimate, then EnKI with the learned emulator.
    Emulate,
    /// Regression-head point estimate only.
    Head,
}

impl std::str::FromStr for EstimateMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(EstimateMode::Baseline),
            "emulate" => Ok(EstimateMode::Emulate),
            "head" => Ok(EstimateMode::Head),
            other => Err(CoreError::config(format!(
                "unknown estimate mode '{other}' (expected baseline|emulate|head)"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct InstanceEstimate {
    pub instance: usize,
    pub point: Vec<f64>,
    /// Final ensemble in physical space; absent in head mode.
    pub final_ensemble: Option<RowMatrix>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub snapshots: Vec<(usize, RowMatrix)>,
    pub prior_clamped: bool,
}

/// Floor applied to observation variances so R stays positive definite.
const VARIANCE_FLOOR: f64 = 1e-12;

fn baseline_variance(config: &RunConfig, obs: &Trajectory, instance_seed: u64) -> Result<Vec<f64>> {
    let layout = config.layout()?;
    let mut var = if config.enki.per_observation_variance {
        moment_variance_of_blocks(obs, &layout, config.enki.variance_blocks)?
    } else {
        // One reference estimate at the fixed prior's physical mean.
        let prior = config.fixed_prior();
        let mean_phys = prior.to_physical(
            &prior
                .components
                .iter()
                .map(|c| c.mean)
                .collect::<Vec<f64>>(),
        );
        let block_len = (config.enki.sim_len / config.enki.variance_blocks).max(1);
        let mut rng = derive_rng(instance_seed, &[tag::ESTIMATE, 0x7a]);
        moment_variance(
            &config.sim_spec()?,
            &mean_phys,
            block_len,
            config.enki.variance_blocks,
            &mut rng,
        )?
    };
    for v in &mut var {
        *v = v.max(VARIANCE_FLOOR);
    }
    Ok(var)
}

/// Random crops of the observation used for test-time head/embedding
/// estimates.
fn estimate_crops(config: &RunConfig, obs: &Trajectory, instance_seed: u64) -> Result<Vec<Trajectory>> {
    let mut rng = derive_rng(instance_seed, &[tag::ESTIMATE]);
    (0..config.test_crops)
        .map(|_| crop(obs, config.crop_len.min(obs.len()), &mut rng))
        .collect()
}

/// Estimate the parameters behind one observation.
pub fn estimate_one(
    config: &RunConfig,
    mode: EstimateMode,
    checkpoint: Option<&Checkpoint>,
    obs: &Trajectory,
    instance: usize,
) -> Result<InstanceEstimate> {
    let layout = config.layout()?;
    let instance_seed = derive_seed(config.seed, &[tag::ESTIMATE, instance as u64]);
    match mode {
        EstimateMode::Baseline => {
            let y = moments(&obs.states, &layout)?.0;
            let var = baseline_variance(config, obs, instance_seed)?;
            let prior = config.fixed_prior();
            let fm = MomentForward {
                sim: config.sim_spec()?,
                sim_len: config.enki.sim_len,
                observation: obs.clone(),
            };
            let cfg = EnkiConfig {
                ensemble_size: config.enki.ensemble_size,
                iterations: config.enki.iterations,
                step_size: config.enki.step_size,
                obs_variance: var,
            };
            let run = run_enki(&y, &fm, &prior, &cfg, instance_seed, config.enki.snapshot_every)?;
            Ok(InstanceEstimate {
                instance,
                point: run.ensemble.mean_physical(&prior),
                final_ensemble: Some(run.ensemble.physical(&prior)),
                diagnostics: run.diagnostics,
                snapshots: run.snapshots,
                prior_clamped: false,
            })
        }
        EstimateMode::Head => {
            let ckpt = checkpoint
                .ok_or_else(|| CoreError::config("head mode requires a checkpoint"))?;
            let crops = estimate_crops(config, obs, instance_seed)?;
            let point = head_estimate(&ckpt.encoder, &ckpt.traj_norm, &ckpt.param_norm, &crops)?;
            Ok(InstanceEstimate {
                instance,
                point,
                final_ensemble: None,
                diagnostics: Vec::new(),
                snapshots: Vec::new(),
                prior_clamped: false,
            })
        }
        EstimateMode::Emulate => {
            let ckpt = checkpoint
                .ok_or_else(|| CoreError::config("emulate mode requires a checkpoint"))?;
            let crops = estimate_crops(config, obs, instance_seed)?;
            let head = head_estimate(&ckpt.encoder, &ckpt.traj_norm, &ckpt.param_norm, &crops)?;
            let y = embedding_estimate(&ckpt.encoder, &ckpt.traj_norm, &crops)?;
            let fixed = config.fixed_prior();
            let (prior, clamped) = match config.prior {
                PriorChoice::Fixed => (fixed, false),
                PriorChoice::EmpBayes => {
                    empirical_bayes_prior(&head, &fixed, &config.empb_variances())?
                }
            };
            let fm = EmulatorForward {
                emulator: ckpt.emulator.clone(),
                param_norm: ckpt.param_norm.clone(),
            };
            let cfg = EnkiConfig {
                ensemble_size: config.enki.ensemble_size,
                iterations: config.enki.iterations,
                step_size: config.enki.step_size,
                obs_variance: vec![1.0; ckpt.emulator.spec.embed_dim],
            };
            let run = run_enki(&y, &fm, &prior, &cfg, instance_seed, config.enki.snapshot_every)?;
            Ok(InstanceEstimate {
                instance,
                point: run.ensemble.mean_physical(&prior),
                final_ensemble: Some(run.ensemble.physical(&prior)),
                diagnostics: run.diagnostics,
                snapshots: run.snapshots,
                prior_clamped: clamped,
            })
        }
    }
}

#[derive(Debug)]
pub enum ObservationSource<'a> {
    /// One trajectory file; the instance id defaults to 0.
    Single(&'a Path),
    /// Every accepted record of a dataset manifest.
    Dataset(&'a Path),
}

#[derive(Debug, Serialize)]
struct EstimateMeta {
    config_hash: String,
    mode: EstimateMode,
    checkpoint_hash: Option<String>,
    component_names: Vec<String>,
    instances: Vec<usize>,
    prior_clamped: Vec<usize>,
}

#[derive(Debug)]
pub struct EstimateOutput {
    pub estimates_path: PathBuf,
    pub instances: Vec<usize>,
}

fn ensemble_csv(names: &[&str], snapshots: &[(usize, RowMatrix)]) -> String {
    let mut out = String::from("iteration,particle");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (iter, particles) in snapshots {
        for m in 0..particles.rows() {
            out.push_str(&format!("{iter},{m}"));
            for v in particles.row(m) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
    }
    out
}

fn diagnostics_csv(names: &[&str], diags: &[IterationDiagnostics]) -> String {
    let mut out = String::from("iteration,valid,spread,objective");
    for n in names {
        out.push_str(&format!(",mean_{n}"));
    }
    out.push('\n');
    for d in diags {
        out.push_str(&format!("{},{},{},{}", d.iteration, d.valid, d.spread, d.objective));
        for v in &d.mean {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Run estimation over one observation or a whole test dataset, writing
/// `estimates.csv` plus per-instance ensemble and diagnostics CSVs.
pub fn cmd_estimate(
    config: &RunConfig,
    mode: EstimateMode,
    checkpoint: Option<&Checkpoint>,
    source: ObservationSource<'_>,
    out_dir: &Path,
) -> Result<EstimateOutput> {
    config.validate()?;
    if matches!(mode, EstimateMode::Emulate | EstimateMode::Head) && checkpoint.is_none() {
        return Err(CoreError::config(format!(
            "mode {mode:?} requires --checkpoint"
        )));
    }
    if let Some(ckpt) = checkpoint {
        if ckpt.config_hash != config.hash() {
            eprintln!(
                "warning: checkpoint config hash {} differs from current config {}",
                ckpt.config_hash,
                config.hash()
            );
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let layout = config.layout()?;
    let names = layout.param_names();

    let observations: Vec<(usize, Trajectory)> = match source {
        ObservationSource::Single(path) => vec![(0, read_trajectory(path)?)],
        ObservationSource::Dataset(path) => {
            let manifest = load_manifest(path)?;
            let dir = path
                .parent()
                .ok_or_else(|| CoreError::invalid("manifest path has no parent"))?;
            manifest
                .accepted()
                .map(|rec| {
                    let file = rec.file.as_ref().expect("accepted record has file");
                    Ok((rec.index, read_trajectory(&dir.join(file))?))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if observations.is_empty() {
        return Err(CoreError::invalid("no observations to estimate"));
    }

    let mut estimates_csv = String::from("instance");
    for n in names {
        estimates_csv.push(',');
        estimates_csv.push_str(n);
    }
    estimates_csv.push('\n');

    let mut instances = Vec::new();
    let mut clamped = Vec::new();
    for (instance, obs) in &observations {
        let est = estimate_one(config, mode, checkpoint, obs, *instance)?;
        estimates_csv.push_str(&instance.to_string());
        for v in &est.point {
            estimates_csv.push(',');
            estimates_csv.push_str(&v.to_string());
        }
        estimates_csv.push('\n');
        if est.prior_clamped {
            clamped.push(*instance);
        }
        if est.final_ensemble.is_some() {
            std::fs::write(
                out_dir.join(format!("ensemble_{instance:06}.csv")),
                ensemble_csv(names, &est.snapshots),
            )?;
            std::fs::write(
                out_dir.join(format!("diagnostics_{instance:06}.csv")),
                diagnostics_csv(names, &est.diagnostics),
            )?;
        }
        instances.push(*instance);
    }

    let estimates_path = out_dir.join("estimates.csv");
    std::fs::write(&estimates_path, estimates_csv)?;
    let meta = EstimateMeta {
        config_hash: config.hash(),
        mode,
        checkpoint_hash: checkpoint.map(|c| c.config_hash.clone()),
        component_names: names.iter().map(|s| s.to_string()).collect(),
        instances: instances.clone(),
        prior_clamped: clamped,
    };
    std::fs::write(
        out_dir.join("estimate_meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(EstimateOutput {
        estimates_path,
        instances,
    })
}
