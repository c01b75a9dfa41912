//! Dataset generation and on-disk layout.
//!
//! Stage 1 draws parameters uniformly over the configured range and
//! simulates each; stage 2 filters trajectories that diverged or came out
//! degenerate. Accepted trajectories go to the trajectory store; a manifest
//! JSON plus a `truths.csv` describe the split.

use super::config::{RunConfig, SampleSpec};
use crate::dynamics::{
    add_observation_noise, read_trajectory, sample_initial_condition, validate_trajectory,
    write_trajectory, RejectReason, Trajectory, Validation,
};
use crate::error::{CoreError, Result};
use crate::rng::{derive_rng, tag};
use crate::types::ParamVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Train,
    Test,
}

impl DatasetKind {
    fn stream_tag(self) -> u64 {
        match self {
            DatasetKind::Train => 0,
            DatasetKind::Test => 1,
        }
    }

    pub fn stem(self) -> &'static str {
        match self {
            DatasetKind::Train => "train",
            DatasetKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub params: Vec<f64>,
    /// Trajectory file, relative to the manifest directory; absent for
    /// rejected draws.
    pub file: Option<String>,
    pub accepted: bool,
    #[serde(default)]
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub kind: DatasetKind,
    pub system: crate::dynamics::SystemId,
    pub component_names: Vec<String>,
    pub dt: f64,
    pub traj_len: usize,
    pub noise_r: f64,
    pub seed: u64,
    pub n_requested: usize,
    pub n_accepted: usize,
    pub records: Vec<DatasetRecord>,
}

impl DatasetManifest {
    pub fn accepted(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.records.iter().filter(|r| r.accepted)
    }
}

fn draw_params(spec: &SampleSpec, rng: &mut rand_chacha::ChaCha12Rng) -> Vec<f64> {
    spec.range_min
        .iter()
        .zip(&spec.range_max)
        .map(|(lo, hi)| {
            if lo == hi {
                *lo
            } else {
                rng.gen_range(*lo..*hi)
            }
        })
        .collect()
}

/// Generate one split and write it under `out_dir`. Returns the manifest;
/// fewer accepted samples than requested is reported via the counts, not an
/// error.
pub fn gen_data(config: &RunConfig, kind: DatasetKind, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let sim = config.sim_spec()?;
    let layout = config.layout()?;
    let spec = match kind {
        DatasetKind::Train => &config.train,
        DatasetKind::Test => &config.test,
    };
    std::fs::create_dir_all(out_dir)?;
    let kind_tag = kind.stream_tag();
    let noise_r = match kind {
        DatasetKind::Train => 0.0,
        DatasetKind::Test => config.noise_r,
    };

    struct Generated {
        params: Vec<f64>,
        outcome: std::result::Result<Trajectory, RejectReason>,
    }

    let results: Vec<Generated> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut prng = derive_rng(config.seed, &[tag::INIT_PARAMS, kind_tag, i as u64]);
            let params = draw_params(spec, &mut prng);
            let mut srng = derive_rng(config.seed, &[tag::DATA_SAMPLE, kind_tag, i as u64]);
            let ic = sample_initial_condition(&layout, &mut srng);
            let outcome = match sim.simulate(&params, spec.traj_len, &ic, config.seed) {
                Err(_) => Err(RejectReason::NonFinite),
                Ok(mut z) => match validate_trajectory(&z) {
                    Validation::Reject(reason) => Err(reason),
                    Validation::Accept => {
                        z.meta.filtered = true;
                        if noise_r > 0.0 {
                            let mut nrng =
                                derive_rng(config.seed, &[tag::OBS_NOISE, kind_tag, i as u64]);
                            match add_observation_noise(&z, noise_r, &mut nrng) {
                                Ok(noisy) => Ok(noisy),
                                Err(_) => Err(RejectReason::NonFinite),
                            }
                        } else {
                            Ok(z)
                        }
                    }
                },
            };
            Generated { params, outcome }
        })
        .collect();

    let mut records = Vec::with_capacity(spec.n);
    let mut n_accepted = 0;
    for (i, gen) in results.into_iter().enumerate() {
        match gen.outcome {
            Ok(z) => {
                let file = format!("{}_{i:06}.bin", kind.stem());
                write_trajectory(&out_dir.join(&file), &z)?;
                n_accepted += 1;
                records.push(DatasetRecord {
                    index: i,
                    params: gen.params,
                    file: Some(file),
                    accepted: true,
                    reject_reason: None,
                });
            }
            Err(reason) => {
                records.push(DatasetRecord {
                    index: i,
                    params: gen.params,
                    file: None,
                    accepted: false,
                    reject_reason: Some(reason),
                });
            }
        }
    }

    let manifest = DatasetManifest {
        config_hash: config.hash(),
        kind,
        system: layout.system_id(),
        component_names: layout.param_names().iter().map(|s| s.to_string()).collect(),
        dt: config.dt,
        traj_len: spec.traj_len,
        noise_r,
        seed: config.seed,
        n_requested: spec.n,
        n_accepted,
        records,
    };
    write_manifest(out_dir, &manifest)?;
    write_truths_csv(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn manifest_path(out_dir: &Path, kind: DatasetKind) -> PathBuf {
    out_dir.join(format!("{}_manifest.json", kind.stem()))
}

fn write_manifest(out_dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let path = manifest_path(out_dir, manifest.kind);
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// `instance,<components...>` rows for the accepted records.
fn write_truths_csv(out_dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut out = String::from("instance");
    for name in &manifest.component_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for rec in manifest.accepted() {
        out.push_str(&rec.index.to_string());
        for v in &rec.params {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    std::fs::write(
        out_dir.join(format!("{}_truths.csv", manifest.kind.stem())),
        out,
    )?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every accepted record's parameters and trajectory.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<ParamVector>, Vec<Trajectory>)> {
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| CoreError::invalid("manifest path has no parent directory"))?;
    let mut params = Vec::with_capacity(manifest.n_accepted);
    let mut trajectories = Vec::with_capacity(manifest.n_accepted);
    for rec in manifest.accepted() {
        let file = rec
            .file
            .as_ref()
            .ok_or_else(|| CoreError::invalid("accepted record without file"))?;
        let z = read_trajectory(&dir.join(file))?;
        params.push(ParamVector::new(rec.params.clone()));
        trajectories.push(z);
    }
    Ok((manifest, params, trajectories))
}
