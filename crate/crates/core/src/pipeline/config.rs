//! Run configuration: one JSON file drives data generation, training,
//! estimation, evaluation, and heatmaps. The resolved config is hashed and
//! the hash stamped into every output for provenance.

use crate::dynamics::{SimSpec, Substeps, SystemId, SystemLayout};
use crate::enki::Prior;
use crate::error::{CoreError, Result};
use crate::losses::{LossWeights, TauPrimeRamp, TemperatureSchedule};
use crate::nn::{EmulatorSpec, EncoderSpec, PaddingMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L96Dims {
    pub k_slow: usize,
    pub j_fast: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KseDims {
    pub dim: usize,
    pub half_period: f64,
}

/// Sampling plan for one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Number of parameter draws (before filtering).
    pub n: usize,
    /// Recorded steps per trajectory.
    pub traj_len: usize,
    pub range_min: Vec<f64>,
    pub range_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveCfg {
    pub threshold: f64,
    #[serde(default = "default_perturb_prob")]
    pub perturb_prob: f64,
    #[serde(default = "default_perturb_std")]
    pub perturb_std: f64,
}

fn default_perturb_prob() -> f64 {
    0.5
}

fn default_perturb_std() -> f64 {
    0.04
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCfg {
    pub conv_widths: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    #[serde(default = "default_padding")]
    pub padding: PaddingMode,
}

fn default_kernel() -> usize {
    5
}

fn default_stride() -> usize {
    2
}

fn default_padding() -> PaddingMode {
    PaddingMode::Circular
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulatorCfg {
    pub comp_embed: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_blocks() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureCfg {
    pub tau0: f64,
    pub tau_max: f64,
    pub hold_epochs: usize,
    pub tau_prime: f64,
    #[serde(default)]
    pub tau_prime_ramp: Option<TauPrimeRamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimCfg {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Linear-warmup steps; defaults to 5% of the training steps.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    0.01
}

fn default_weight_decay() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnkiCfg {
    pub ensemble_size: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Recorded steps per forward simulation in the moment baseline.
    pub sim_len: usize,
    #[serde(default = "default_variance_blocks")]
    pub variance_blocks: usize,
    /// Estimate `Var[m(Z)_j]` from the observation itself (default) instead
    /// of one reference simulation at the prior mean.
    #[serde(default = "default_true")]
    pub per_observation_variance: bool,
    /// Snapshot stride for ensemble CSV export; 0 keeps first/last only.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_variance_blocks() -> usize {
    20
}

fn default_true() -> bool {
    true
}

fn default_snapshot_every() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorChoice {
    Fixed,
    EmpBayes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub system: SystemId,
    #[serde(default)]
    pub l96: Option<L96Dims>,
    #[serde(default)]
    pub kse: Option<KseDims>,
    pub dt: f64,
    /// RK4 substeps per recorded interval; `None` uses the KSE stability
    /// rule (KSE only).
    #[serde(default)]
    pub substeps: Option<usize>,
    #[serde(default)]
    pub burn_in: usize,
    pub train: SampleSpec,
    pub test: SampleSpec,
    /// Observation-noise scale applied to test observations.
    #[serde(default)]
    pub noise_r: f64,
    pub crop_len: usize,
    pub positive: PositiveCfg,
    pub encoder: EncoderCfg,
    pub emulator: EmulatorCfg,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub temperature: TemperatureCfg,
    pub bank_capacity: usize,
    pub optimizer: OptimCfg,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Crops averaged for test-time estimates.
    #[serde(default = "default_test_crops")]
    pub test_crops: usize,
    #[serde(default = "default_validation_samples")]
    pub validation_samples: usize,
    pub enki: EnkiCfg,
    pub prior: PriorChoice,
    /// Override for the fixed prior; defaults to the per-system values.
    #[serde(default)]
    pub fixed_prior: Option<Prior>,
    /// Override for the empirical-Bayes variances.
    #[serde(default)]
    pub empb_variances: Option<Vec<f64>>,
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-6
}

fn default_test_crops() -> usize {
    8
}

fn default_validation_samples() -> usize {
    5
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CoreError::config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> Result<SystemLayout> {
        match self.system {
            SystemId::L96 => {
                let d = self
                    .l96
                    .ok_or_else(|| CoreError::config("system l96 requires the l96 section"))?;
                Ok(SystemLayout::L96 {
                    k_slow: d.k_slow,
                    j_fast: d.j_fast,
                })
            }
            SystemId::Kse => {
                let d = self
                    .kse
                    .ok_or_else(|| CoreError::config("system kse requires the kse section"))?;
                Ok(SystemLayout::Kse {
                    dim: d.dim,
                    half_period: d.half_period,
                })
            }
        }
    }

    pub fn sim_spec(&self) -> Result<SimSpec> {
        let layout = self.layout()?;
        let substeps = match (self.substeps, &layout) {
            (Some(n), _) => Substeps::Fixed(n),
            (None, SystemLayout::Kse { .. }) => Substeps::Auto,
            (None, SystemLayout::L96 { .. }) => {
                return Err(CoreError::config("l96 requires explicit substeps"))
            }
        };
        Ok(SimSpec {
            layout,
            dt: self.dt,
            substeps,
            burn_in: self.burn_in,
        })
    }

    pub fn encoder_spec(&self) -> Result<EncoderSpec> {
        let layout = self.layout()?;
        Ok(EncoderSpec {
            crop_len: self.crop_len,
            channels: layout.state_dim(),
            conv_widths: self.encoder.conv_widths.clone(),
            kernel: self.encoder.kernel,
            stride: self.encoder.stride,
            hidden_dim: self.encoder.hidden_dim,
            embed_dim: self.encoder.embed_dim,
            padding: self.encoder.padding,
            regression_dim: layout.param_dim(),
        })
    }

    pub fn emulator_spec(&self) -> Result<EmulatorSpec> {
        let layout = self.layout()?;
        Ok(EmulatorSpec {
            param_dim: layout.param_dim(),
            comp_embed: self.emulator.comp_embed,
            blocks: self.emulator.blocks,
            embed_dim: self.encoder.embed_dim,
        })
    }

    pub fn temperature_schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            tau0: self.temperature.tau0,
            tau_max: self.temperature.tau_max,
            hold_epochs: self.temperature.hold_epochs,
            total_epochs: self.epochs,
            tau_prime: self.temperature.tau_prime,
            tau_prime_ramp: self.temperature.tau_prime_ramp,
        }
    }

    pub fn fixed_prior(&self) -> Prior {
        match (&self.fixed_prior, self.system) {
            (Some(p), _) => p.clone(),
            (None, SystemId::L96) => Prior::l96_fixed(),
            (None, SystemId::Kse) => Prior::kse_fixed(),
        }
    }

    pub fn empb_variances(&self) -> Vec<f64> {
        match (&self.empb_variances, self.system) {
            (Some(v), _) => v.clone(),
            (None, SystemId::L96) => Prior::l96_empb_variances(),
            (None, SystemId::Kse) => Prior::kse_empb_variances(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        let k = layout.param_dim();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(CoreError::config("dt must be positive"));
        }
        self.sim_spec()?;
        for (name, spec) in [("train", &self.train), ("test", &self.test)] {
            if spec.range_min.len() != k || spec.range_max.len() != k {
                return Err(CoreError::config(format!(
                    "{name} ranges must have {k} components"
                )));
            }
            if spec
                .range_min
                .iter()
                .zip(&spec.range_max)
                .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite()) || lo > hi)
            {
                return Err(CoreError::config(format!("{name} range is inverted")));
            }
            if spec.n == 0 || spec.traj_len == 0 {
                return Err(CoreError::config(format!("{name} split must be non-empty")));
            }
            if self.crop_len > spec.traj_len {
                return Err(CoreError::config(format!(
                    "crop length {} exceeds {name} trajectory length {}",
                    self.crop_len, spec.traj_len
                )));
            }
        }
        let inside = self
            .test
            .range_min
            .iter()
            .zip(&self.train.range_min)
            .all(|(t, tr)| t >= tr)
            && self
                .test
                .range_max
                .iter()
                .zip(&self.train.range_max)
                .all(|(t, tr)| t <= tr);
        if !inside {
            return Err(CoreError::config(
                "test range must lie inside the train range componentwise",
            ));
        }
        if self.batch_size < 2 || self.batch_size > self.train.n {
            return Err(CoreError::config(
                "batch size must be in [2, n] (use batch = n for full-batch steps)",
            ));
        }
        if self.epochs == 0 {
            return Err(CoreError::config("epochs must be >= 1"));
        }
        if self.validation_samples == 0 || self.validation_samples >= self.train.n {
            return Err(CoreError::config(
                "validation split must be >= 1 and smaller than the dataset",
            ));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config("eps must be positive"));
        }
        if self.noise_r < 0.0 {
            return Err(CoreError::config("noise scale r must be >= 0"));
        }
        if self.test_crops == 0 {
            return Err(CoreError::config("test_crops must be >= 1"));
        }
        if self.positive.threshold <= 0.0
            || !(0.0..=1.0).contains(&self.positive.perturb_prob)
            || self.positive.perturb_std < 0.0
        {
            return Err(CoreError::config("invalid positive-pair rule"));
        }
        if self.bank_capacity == 0 {
            return Err(CoreError::config("bank capacity must be >= 1"));
        }
        self.encoder_spec()?.validate()?;
        self.emulator_spec()?.validate()?;
        self.temperature_schedule().validate()?;
        self.loss_weights.validate()?;
        if self.enki.ensemble_size < 2
            || self.enki.iterations == 0
            || !(self.enki.step_size > 0.0)
            || self.enki.sim_len == 0
            || self.enki.variance_blocks < 2
        {
            return Err(CoreError::config("invalid enki section"));
        }
        let fixed = self.fixed_prior();
        fixed.validate()?;
        if fixed.dim() != k {
            return Err(CoreError::config("fixed prior dimension mismatch"));
        }
        if self.empb_variances().len() != k {
            return Err(CoreError::config("empB variance dimension mismatch"));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(CoreError::config("invalid optimizer section"));
        }
        Ok(())
    }

    /// Hex digest prefix of the resolved config JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Desk-scale L96 default: a reduced system (K=8, J=4) with the full
    /// parameter ranges, sized for a single CPU.
    pub fn desk_l96(seed: u64) -> Self {
        RunConfig {
            system: SystemId::L96,
            l96: Some(L96Dims {
                k_slow: 8,
                j_fast: 4,
            }),
            kse: None,
            dt: 0.1,
            substeps: Some(100),
            burn_in: 0,
            train: SampleSpec {
                n: 256,
                traj_len: 256,
                range_min: vec![-5.0, 0.0, 0.1, 0.0],
                range_max: vec![20.0, 5.0, 25.0, 25.0],
            },
            test: SampleSpec {
                n: 192,
                traj_len: 256,
                range_min: vec![-3.0, 0.5, 2.0, 2.0],
                range_max: vec![18.0, 4.5, 23.0, 23.0],
            },
            noise_r: 0.0,
            crop_len: 64,
            positive: PositiveCfg {
                threshold: 0.45,
                perturb_prob: 0.5,
                perturb_std: 0.04,
            },
            encoder: EncoderCfg {
                conv_widths: vec![32, 48, 64],
                kernel: 5,
                stride: 2,
                hidden_dim: 128,
                embed_dim: 16,
                padding: PaddingMode::Circular,
            },
            emulator: EmulatorCfg {
                comp_embed: 64,
                blocks: 3,
            },
            loss_weights: LossWeights::default(),
            temperature: TemperatureCfg {
                tau0: 0.15,
                tau_max: 0.5,
                hold_epochs: 100,
                tau_prime: 0.15,
                tau_prime_ramp: None,
            },
            bank_capacity: 768,
            optimizer: OptimCfg {
                lr: 0.01,
                warmup_steps: None,
                weight_decay: 1e-5,
            },
            batch_size: 32,
            epochs: 200,
            eps: 1e-6,
            test_crops: 8,
            validation_samples: 5,
            enki: EnkiCfg {
                ensemble_size: 1000,
                iterations: 30,
                step_size: 0.3,
                sim_len: 500,
                variance_blocks: 20,
                per_observation_variance: true,
                snapshot_every: 1,
            },
            prior: PriorChoice::EmpBayes,
            fixed_prior: None,
            empb_variances: None,
            seed,
        }
    }

    /// Desk-scale KSE default on a reduced grid.
    pub fn desk_kse(seed: u64) -> Self {
        let mut cfg = Self::desk_l96(seed);
        cfg.system = SystemId::Kse;
        cfg.l96 = None;
        cfg.kse = Some(KseDims {
            dim: 64,
            half_period: 16.0,
        });
        cfg.dt = 0.5;
        cfg.substeps = None;
        cfg.train = SampleSpec {
            n: 256,
            traj_len: 400,
            range_min: vec![0.1, 0.1, 0.1],
            range_max: vec![10.0, 10.0, 10.0],
        };
        cfg.test = SampleSpec {
            n: 64,
            traj_len: 400,
            range_min: vec![0.5, 0.5, 0.5],
            range_max: vec![9.5, 9.5, 9.5],
        };
        cfg.crop_len = 96;
        cfg.temperature = TemperatureCfg {
            tau0: 0.1,
            tau_max: 0.5,
            hold_epochs: 100,
            tau_prime: 0.1,
            tau_prime_ramp: Some(TauPrimeRamp {
                start_epoch: 100,
                end_epoch: 180,
                max: 0.6,
            }),
        };
        cfg.enki = EnkiCfg {
            ensemble_size: 100,
            iterations: 40,
            step_size: 0.3,
            sim_len: 200,
            variance_blocks: 20,
            per_observation_variance: true,
            snapshot_every: 1,
        };
        cfg
    }
}
