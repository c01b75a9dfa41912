//! Objective-landscape heatmaps over a pair of free parameter components.

use super::config::RunConfig;
use super::train::embedding_estimate;
use crate::dynamics::read_trajectory;
use crate::enki::{emulator_objective, moment_objective, EmulatorForward, MomentForward};
use crate::error::{CoreError, Result};
use crate::features::{crop, moment_variance_of_blocks, moments};
use crate::metrics::{heatmap_grid, HeatmapGrid};
use crate::nn::Checkpoint;
use crate::rng::{derive_rng, tag};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapObjective {
    Moment,
    Emulator,
}

impl std::str::FromStr for HeatmapObjective {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moment" => Ok(HeatmapObjective::Moment),
            "emulator" => Ok(HeatmapObjective::Emulator),
            other => Err(CoreError::config(format!(
                "unknown objective '{other}' (expected moment|emulator)"
            ))),
        }
    }
}

/// Default clip threshold for the unbounded moment objective.
pub const MOMENT_CLIP_DEFAULT: f64 = 100.0;

#[derive(Debug, Serialize)]
struct HeatmapMeta {
    config_hash: String,
    objective: HeatmapObjective,
    pair: (usize, usize),
    pair_names: (String, String),
    truth: Vec<f64>,
    argmin: (usize, usize),
    truth_cell: (usize, usize),
    resolution: usize,
    clip_threshold: Option<f64>,
}

#[derive(Debug)]
pub struct HeatmapOutput {
    pub grid: HeatmapGrid,
    pub csv_path: PathBuf,
    pub meta_path: PathBuf,
}

/// Evaluate the chosen objective on a grid over two free components, holding
/// the rest at the observation's ground-truth parameters.
#[allow(clippy::too_many_arguments)]
pub fn cmd_heatmap(
    config: &RunConfig,
    objective: HeatmapObjective,
    checkpoint: Option<&Checkpoint>,
    observation_path: &Path,
    pair: (usize, usize),
    resolution: usize,
    ranges: Option<[(f64, f64); 2]>,
    clip: Option<f64>,
    out_dir: &Path,
) -> Result<HeatmapOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let layout = config.layout()?;
    let obs = read_trajectory(observation_path)?;
    if obs.meta.params.len() != layout.param_dim() {
        return Err(CoreError::invalid(
            "observation sidecar does not carry the ground-truth parameters",
        ));
    }
    let truth = obs.meta.params.clone();
    let names = layout.param_names();
    let ranges = ranges.unwrap_or([
        (config.test.range_min[pair.0], config.test.range_max[pair.0]),
        (config.test.range_min[pair.1], config.test.range_max[pair.1]),
    ]);

    let grid = match objective {
        HeatmapObjective::Moment => {
            let y = moments(&obs.states, &layout)?.0;
            let mut var = moment_variance_of_blocks(&obs, &layout, config.enki.variance_blocks)?;
            for v in &mut var {
                *v = v.max(1e-12);
            }
            let fm = MomentForward {
                sim: config.sim_spec()?,
                sim_len: config.enki.sim_len,
                observation: obs.clone(),
            };
            let clip = clip.or(Some(MOMENT_CLIP_DEFAULT));
            heatmap_grid(
                |phi, cell| {
                    let mut rng = derive_rng(config.seed, &[tag::HEATMAP_CELL, cell]);
                    moment_objective(&fm, phi, &y, &var, &mut rng)
                },
                &truth,
                pair,
                ranges,
                resolution,
                clip,
            )?
        }
        HeatmapObjective::Emulator => {
            let ckpt = checkpoint
                .ok_or_else(|| CoreError::config("emulator heatmap requires a checkpoint"))?;
            let mut rng = derive_rng(config.seed, &[tag::HEATMAP_CELL]);
            let crops: Vec<_> = (0..config.test_crops)
                .map(|_| crop(&obs, config.crop_len.min(obs.len()), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let y_emb = embedding_estimate(&ckpt.encoder, &ckpt.traj_norm, &crops)?;
            let fm = EmulatorForward {
                emulator: ckpt.emulator.clone(),
                param_norm: ckpt.param_norm.clone(),
            };
            heatmap_grid(
                |phi, _cell| emulator_objective(&fm, phi, &y_emb),
                &truth,
                pair,
                ranges,
                resolution,
                clip,
            )?
        }
    };

    let csv_path = out_dir.join("heatmap.csv");
    std::fs::write(&csv_path, grid.to_csv())?;
    let meta = HeatmapMeta {
        config_hash: config.hash(),
        objective,
        pair,
        pair_names: (names[pair.0].to_string(), names[pair.1].to_string()),
        truth,
        argmin: grid.argmin,
        truth_cell: grid.truth_cell,
        resolution,
        clip_threshold: grid.clip_threshold,
    };
    let meta_path = out_dir.join("heatmap_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(HeatmapOutput {
        grid,
        csv_path,
        meta_path,
    })
}
