//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! JSON header (specs, tensor shapes, optimizer scalars, epoch, config
//! hash), then all tensors as raw little-endian `f64` in header order:
//! encoder params, emulator params, optimizer first moments, second moments.
//! A plain-JSON manifest with the same header is written next to the blob.

use super::{Emulator, EmulatorSpec, Encoder, EncoderSpec, LrSchedule, OptimizerState, Standardizer};
use crate::error::{CoreError, Result};
use crate::graph::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EECKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub emulator: Emulator,
    pub traj_norm: Standardizer,
    pub param_norm: Standardizer,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub initial_val_mape: f64,
    pub best_val_mape: f64,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step_count: usize,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: LrSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    encoder_spec: EncoderSpec,
    emulator_spec: EmulatorSpec,
    traj_norm: Standardizer,
    param_norm: Standardizer,
    optimizer: OptimizerHeader,
    epoch: usize,
    initial_val_mape: f64,
    best_val_mape: f64,
    config_hash: String,
    tensors: Vec<TensorInfo>,
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn tensor_order(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for ((name, _), t) in ckpt
        .encoder
        .spec
        .param_shapes()
        .into_iter()
        .zip(&ckpt.encoder.params)
    {
        out.push((name, t));
    }
    for ((name, _), t) in ckpt
        .emulator
        .spec
        .param_shapes()
        .into_iter()
        .zip(&ckpt.emulator.params)
    {
        out.push((name, t));
    }
    for (i, t) in ckpt.optimizer.first_moment.iter().enumerate() {
        out.push((format!("optimizer.m{i}"), t));
    }
    for (i, t) in ckpt.optimizer.second_moment.iter().enumerate() {
        out.push((format!("optimizer.v{i}"), t));
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tensors = tensor_order(ckpt);
    let header = Header {
        version: CHECKPOINT_VERSION,
        encoder_spec: ckpt.encoder.spec.clone(),
        emulator_spec: ckpt.emulator.spec.clone(),
        traj_norm: ckpt.traj_norm.clone(),
        param_norm: ckpt.param_norm.clone(),
        optimizer: OptimizerHeader {
            step_count: ckpt.optimizer.step_count,
            weight_decay: ckpt.optimizer.weight_decay,
            beta1: ckpt.optimizer.beta1,
            beta2: ckpt.optimizer.beta2,
            eps: ckpt.optimizer.eps,
            schedule: ckpt.optimizer.schedule,
        },
        epoch: ckpt.epoch,
        initial_val_mape: ckpt.initial_val_mape,
        best_val_mape: ckpt.best_val_mape,
        config_hash: ckpt.config_hash.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, t) in &tensors {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::from_vec(&info.shape, data));
    }

    let enc_n = header.encoder_spec.param_shapes().len();
    let emu_n = header.emulator_spec.param_shapes().len();
    let total = enc_n + emu_n;
    if tensors.len() != 3 * total {
        return Err(CoreError::Checkpoint(format!(
            "expected {} tensors, found {}",
            3 * total,
            tensors.len()
        )));
    }
    let rest = tensors.split_off(enc_n);
    let encoder = Encoder {
        spec: header.encoder_spec,
        params: tensors,
    };
    let mut rest_iter = rest;
    let after_emu = rest_iter.split_off(emu_n);
    let emulator = Emulator {
        spec: header.emulator_spec,
        params: rest_iter,
    };
    let mut moments = after_emu;
    let second = moments.split_off(total);
    let optimizer = OptimizerState {
        first_moment: moments,
        second_moment: second,
        step_count: header.optimizer.step_count,
        weight_decay: header.optimizer.weight_decay,
        beta1: header.optimizer.beta1,
        beta2: header.optimizer.beta2,
        eps: header.optimizer.eps,
        schedule: header.optimizer.schedule,
    };
    Ok(Checkpoint {
        encoder,
        emulator,
        traj_norm: header.traj_norm,
        param_norm: header.param_norm,
        optimizer,
        epoch: header.epoch,
        initial_val_mape: header.initial_val_mape,
        best_val_mape: header.best_val_mape,
        config_hash: header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::PaddingMode;
    use crate::rng::derive_rng;

    #[test]
    fn checkpoint_round_trip() {
        let enc_spec = EncoderSpec {
            crop_len: 8,
            channels: 3,
            conv_widths: vec![4],
            kernel: 3,
            stride: 2,
            hidden_dim: 6,
            embed_dim: 5,
            padding: PaddingMode::Circular,
            regression_dim: 4,
        };
        let emu_spec = EmulatorSpec {
            param_dim: 4,
            comp_embed: 3,
            blocks: 1,
            embed_dim: 5,
        };
        let mut rng = derive_rng(9, &[1]);
        let encoder = Encoder::init(enc_spec, &mut rng).unwrap();
        let emulator = Emulator::init(emu_spec, &mut rng).unwrap();
        let shapes: Vec<Vec<usize>> = encoder
            .params
            .iter()
            .chain(&emulator.params)
            .map(|t| t.shape().to_vec())
            .collect();
        let optimizer = OptimizerState::new(
            &shapes,
            LrSchedule {
                base_lr: 0.01,
                warmup_steps: 3,
                total_steps: 50,
            },
            1e-5,
        );
        let ckpt = Checkpoint {
            encoder,
            emulator,
            traj_norm: Standardizer::identity(3),
            param_norm: Standardizer::identity(4),
            optimizer,
            epoch: 17,
            initial_val_mape: 1.25,
            best_val_mape: 0.33,
            config_hash: "deadbeef".into(),
        };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(manifest_path(&path).exists());

        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(back.config_hash, "deadbeef");
        assert_eq!(back.encoder.params, ckpt.encoder.params);
        assert_eq!(back.emulator.params, ckpt.emulator.params);
        assert_eq!(back.optimizer, ckpt.optimizer);
        assert_eq!(back.best_val_mape, 0.33);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"WRONG!!!rest").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
