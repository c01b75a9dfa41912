//! Joint contrastive training of the encoder, regression head, and emulator.

use super::config::RunConfig;
use super::dataset::load_dataset;
use crate::dynamics::Trajectory;
use crate::error::{CoreError, Result};
use crate::features::{crop, select_positive, PositivePairRule};
use crate::graph::{Graph, Tensor};
use crate::losses::{
    clip_loss, info_nce, mape_loss, temperature_at, total_loss, LossTerms, MemoryBank,
};
use crate::nn::{
    save_checkpoint, Checkpoint, Emulator, Encoder, LrSchedule, OptimizerState, Standardizer,
};
use crate::rng::{derive_rng, tag};
use crate::types::ParamVector;
use rand::seq::SliceRandom;
use std::path::{Path, PathBuf};

/// Stack standardized crops as a `(B, d, L)` input tensor.
pub fn crops_to_tensor(crops: &[Trajectory], norm: &Standardizer) -> Tensor {
    let b = crops.len();
    assert!(b > 0, "empty crop batch");
    let len = crops[0].len();
    let d = crops[0].dim();
    let mut data = vec![0.0; b * d * len];
    for (bi, z) in crops.iter().enumerate() {
        assert_eq!(z.len(), len, "ragged crop batch");
        for t in 0..len {
            let row = z.states.row(t);
            for c in 0..d {
                data[(bi * d + c) * len + t] = (row[c] - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Tensor::from_vec(&[b, d, len], data)
}

/// Evenly spaced crop start offsets covering the trajectory.
pub fn deterministic_crop_starts(traj_len: usize, crop_len: usize, count: usize) -> Vec<usize> {
    let span = traj_len - crop_len;
    if count <= 1 || span == 0 {
        return vec![0; count.max(1)];
    }
    (0..count).map(|i| i * span / (count - 1)).collect()
}

fn crop_at(z: &Trajectory, start: usize, len: usize) -> Trajectory {
    Trajectory {
        states: z.states.row_block(start, len),
        dt: z.dt,
        meta: z.meta.clone(),
    }
}

/// Average the regression head over a set of crops. The head is trained
/// against standardized targets, so its raw output is mapped back to
/// physical values through `param_norm`.
pub fn head_estimate(
    encoder: &Encoder,
    norm: &Standardizer,
    param_norm: &Standardizer,
    crops: &[Trajectory],
) -> Result<Vec<f64>> {
    let input = crops_to_tensor(crops, norm);
    let (_, reg) = encoder.infer(&input)?;
    let k = encoder.spec.regression_dim;
    let b = crops.len();
    let mut out = vec![0.0; k];
    for r in 0..b {
        for (j, o) in out.iter_mut().enumerate() {
            *o += reg.data()[r * k + j];
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o = *o / b as f64 * param_norm.std[j] + param_norm.mean[j];
    }
    Ok(out)
}

/// Average the embedding over a set of crops and renormalize onto the
/// sphere (the emulator objective compares unit vectors).
pub fn embedding_estimate(
    encoder: &Encoder,
    norm: &Standardizer,
    crops: &[Trajectory],
) -> Result<Vec<f64>> {
    let input = crops_to_tensor(crops, norm);
    let (emb, _) = encoder.infer(&input)?;
    let p = encoder.spec.embed_dim;
    let b = crops.len();
    let mut out = vec![0.0; p];
    for r in 0..b {
        for (j, o) in out.iter_mut().enumerate() {
            *o += emb.data()[r * p + j];
        }
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(CoreError::numerical("degenerate averaged embedding"));
    }
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Mean APE (percent) of the head estimate over a validation set, using
/// deterministic evenly spaced crops.
#[allow(clippy::too_many_arguments)]
pub fn validation_mape(
    encoder: &Encoder,
    norm: &Standardizer,
    param_norm: &Standardizer,
    params: &[ParamVector],
    trajectories: &[Trajectory],
    crop_len: usize,
    crops_per_sample: usize,
    eps: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (phi, z) in params.iter().zip(trajectories) {
        let crops: Vec<Trajectory> = deterministic_crop_starts(z.len(), crop_len, crops_per_sample)
            .into_iter()
            .map(|s| crop_at(z, s, crop_len))
            .collect();
        let est = head_estimate(encoder, norm, param_norm, &crops)?;
        for (e, t) in est.iter().zip(phi.as_slice()) {
            total += 100.0 * (e - t).abs() / (t.abs() + eps);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub tau_prime: f64,
    pub loss_zz: f64,
    pub loss_pp: f64,
    pub loss_zp: f64,
    pub loss_mape: f64,
    pub loss_total: f64,
    pub val_mape_percent: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub initial_val_mape: f64,
    pub best_val_mape: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

const VALIDATION_CROPS: usize = 16;

/// Full training command: loads the dataset, reserves the validation split,
/// runs the epoch loop, and writes the best-validation checkpoint plus a
/// per-epoch log CSV.
pub fn cmd_train(config: &RunConfig, dataset_manifest: &Path, out_dir: &Path) -> Result<TrainResult> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (manifest, all_params, all_trajs) = load_dataset(dataset_manifest)?;
    if manifest.config_hash != config.hash() {
        // Not fatal: datasets are reusable across compatible configs, but
        // surface the mismatch in the log for provenance.
        eprintln!(
            "warning: dataset config hash {} differs from current config {}",
            manifest.config_hash,
            config.hash()
        );
    }
    if all_params.len() < config.batch_size {
        return Err(CoreError::invalid(format!(
            "dataset has {} accepted samples, need at least the batch size {}",
            all_params.len(),
            config.batch_size
        )));
    }
    if all_params.len() <= config.validation_samples + 1 {
        return Err(CoreError::invalid("dataset too small for the validation split"));
    }

    // Last samples form the validation split; training never touches them.
    let n_train = all_params.len() - config.validation_samples;
    let (train_params, val_params) = all_params.split_at(n_train);
    let (train_trajs, val_trajs) = all_trajs.split_at(n_train);

    let layout = config.layout()?;
    let d = layout.state_dim();
    let traj_norm = Standardizer::fit(
        train_trajs
            .iter()
            .flat_map(|z| (0..z.len()).map(move |i| z.states.row(i))),
        d,
    );
    let param_norm = Standardizer::fit(train_params.iter().map(|p| p.as_slice()), layout.param_dim());

    let mut init_rng = derive_rng(config.seed, &[tag::INIT_PARAMS]);
    let mut encoder = Encoder::init(config.encoder_spec()?, &mut init_rng)?;
    let mut emulator = Emulator::init(config.emulator_spec()?, &mut init_rng)?;

    let steps_per_epoch = (n_train / config.batch_size).max(1);
    let total_steps = steps_per_epoch * config.epochs;
    let schedule = LrSchedule {
        base_lr: config.optimizer.lr,
        warmup_steps: config
            .optimizer
            .warmup_steps
            .unwrap_or_else(|| (total_steps / 20).max(1)),
        total_steps,
    };
    let shapes: Vec<Vec<usize>> = encoder
        .params
        .iter()
        .chain(&emulator.params)
        .map(|t| t.shape().to_vec())
        .collect();
    let mut optimizer = OptimizerState::new(&shapes, schedule, config.optimizer.weight_decay);

    let sched = config.temperature_schedule();
    let rule = PositivePairRule {
        threshold: config.positive.threshold,
        perturb_prob: config.positive.perturb_prob,
        perturb_std: config.positive.perturb_std,
        crop_len: config.crop_len,
    };
    let p = config.encoder.embed_dim;
    let mut z_bank = MemoryBank::new(config.bank_capacity, p);
    let mut p_bank = MemoryBank::new(config.bank_capacity, p);

    let initial_val_mape = validation_mape(
        &encoder,
        &traj_norm,
        &param_norm,
        val_params,
        val_trajs,
        config.crop_len,
        VALIDATION_CROPS,
        config.eps,
    )?;

    // The head is trained on standardized targets; de-standardization back
    // to physical values happens right before the loss so the loss itself
    // stays a plain MAPE on physical parameters.
    let k_dim = layout.param_dim();
    let destd_scale = |b: usize| {
        let mut data = Vec::with_capacity(b * k_dim);
        for _ in 0..b {
            data.extend_from_slice(&param_norm.std);
        }
        Tensor::from_vec(&[b, k_dim], data)
    };
    let destd_offset = |b: usize| {
        let mut data = Vec::with_capacity(b * k_dim);
        for _ in 0..b {
            data.extend_from_slice(&param_norm.mean);
        }
        Tensor::from_vec(&[b, k_dim], data)
    };

    let mut logs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_encoder = encoder.clone();
    let mut best_emulator = emulator.clone();
    let mut best_optimizer = optimizer.clone();

    let mut indices: Vec<usize> = (0..n_train).collect();
    for epoch in 0..config.epochs {
        let (tau, tau_prime) = temperature_at(epoch, &sched);
        let mut epoch_rng = derive_rng(config.seed, &[tag::TRAIN_STEP, epoch as u64]);
        indices.shuffle(&mut epoch_rng);

        let mut sums = [0.0; 5];
        let mut last_lr = optimizer.current_lr();
        let mut steps = 0usize;
        for (step, chunk) in indices.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 || steps >= steps_per_epoch {
                continue;
            }
            let mut rng = derive_rng(config.seed, &[tag::TRAIN_STEP, epoch as u64, step as u64]);

            let mut anchor_crops = Vec::with_capacity(chunk.len());
            let mut positive_crops = Vec::with_capacity(chunk.len());
            let mut phi_rows = Vec::with_capacity(chunk.len());
            let mut phit_rows = Vec::with_capacity(chunk.len());
            let mut truth_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                anchor_crops.push(crop(&train_trajs[i], config.crop_len, &mut rng)?);
                let pair = select_positive(i, train_params, train_trajs, &rule, config.eps, &mut rng)?;
                let pos = if pair.trajectory.len() > config.crop_len {
                    crop(&pair.trajectory, config.crop_len, &mut rng)?
                } else {
                    pair.trajectory
                };
                positive_crops.push(pos);
                phi_rows.push(param_norm.apply_vec(train_params[i].as_slice()));
                phit_rows.push(param_norm.apply_vec(pair.params.as_slice()));
                truth_rows.push(train_params[i].as_slice().to_vec());
            }
            let b = chunk.len();
            let k = layout.param_dim();
            let anchors_t = crops_to_tensor(&anchor_crops, &traj_norm);
            let positives_t = crops_to_tensor(&positive_crops, &traj_norm);
            let phi_t = Tensor::from_vec(&[b, k], phi_rows.concat());
            let phit_t = Tensor::from_vec(&[b, k], phit_rows.concat());
            let truths = crate::linalg::RowMatrix::from_rows(&truth_rows);

            let mut g = Graph::new();
            let enc_bind = encoder.bind(&mut g);
            let emu_bind = emulator.bind(&mut g);
            let anchors_in = g.constant(anchors_t);
            let positives_in = g.constant(positives_t);
            let (emb_a, reg_a) = encoder.forward(&mut g, &enc_bind, anchors_in)?;
            let (emb_p, _) = encoder.forward(&mut g, &enc_bind, positives_in)?;
            let phi_in = g.constant(phi_t);
            let phit_in = g.constant(phit_t);
            let gem_a = emulator.forward(&mut g, &emu_bind, phi_in)?;
            let gem_p = emulator.forward(&mut g, &emu_bind, phit_in)?;

            let z_bank_node = z_bank.as_tensor().map(|t| g.constant(t));
            let p_bank_node = p_bank.as_tensor().map(|t| g.constant(t));

            let l_zz = info_nce(&mut g, emb_a, emb_p, z_bank_node, tau)?;
            let l_pp = info_nce(&mut g, gem_a, gem_p, p_bank_node, tau)?;
            let l_zp = clip_loss(&mut g, emb_a, gem_a, z_bank_node, p_bank_node, tau_prime)?;
            let scale_node = g.constant(destd_scale(b));
            let offset_node = g.constant(destd_offset(b));
            let reg_scaled = g.mul(reg_a, scale_node);
            let reg_phys = g.add(reg_scaled, offset_node);
            let l_mape = mape_loss(&mut g, reg_phys, &truths, config.eps)?;
            let total = total_loss(
                &mut g,
                &LossTerms {
                    zz: Some(l_zz),
                    pp: Some(l_pp),
                    zp: Some(l_zp),
                    mape: Some(l_mape),
                },
                &config.loss_weights,
            )?;

            let values = [
                g.value(l_zz).item(),
                g.value(l_pp).item(),
                g.value(l_zp).item(),
                g.value(l_mape).item(),
                g.value(total).item(),
            ];
            if !values[4].is_finite() {
                return Err(CoreError::numerical(format!(
                    "non-finite loss at epoch {epoch} step {step}: zz={} pp={} zp={} mape={}",
                    values[0], values[1], values[2], values[3]
                )));
            }

            let grads = g.backward(total)?;
            let grad_tensors: Vec<Tensor> = enc_bind
                .ids
                .iter()
                .zip(&encoder.params)
                .chain(emu_bind.ids.iter().zip(&emulator.params))
                .map(|(id, t)| grads.of_param(*id, t.shape()))
                .collect();
            let mut param_refs: Vec<&mut Tensor> = encoder
                .params
                .iter_mut()
                .chain(emulator.params.iter_mut())
                .collect();
            last_lr = optimizer.step(&mut param_refs, &grad_tensors);

            z_bank.update(g.value(emb_a))?;
            p_bank.update(g.value(gem_a))?;

            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
            steps += 1;
        }

        let inv = 1.0 / steps.max(1) as f64;
        let val = validation_mape(
            &encoder,
            &traj_norm,
            &param_norm,
            val_params,
            val_trajs,
            config.crop_len,
            VALIDATION_CROPS,
            config.eps,
        )?;
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_encoder = encoder.clone();
            best_emulator = emulator.clone();
            best_optimizer = optimizer.clone();
        }
        logs.push(EpochLog {
            epoch,
            lr: last_lr,
            tau,
            tau_prime,
            loss_zz: sums[0] * inv,
            loss_pp: sums[1] * inv,
            loss_zp: sums[2] * inv,
            loss_mape: sums[3] * inv,
            loss_total: sums[4] * inv,
            val_mape_percent: val,
        });
    }

    let checkpoint = Checkpoint {
        encoder: best_encoder,
        emulator: best_emulator,
        traj_norm,
        param_norm,
        optimizer: best_optimizer,
        epoch: best_epoch,
        initial_val_mape,
        best_val_mape: best_val,
        config_hash: config.hash(),
    };
    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&checkpoint_path, &checkpoint)?;

    let log_path = out_dir.join("train_log.csv");
    let mut csv = String::from(
        "epoch,lr,tau,tau_prime,loss_zz,loss_pp,loss_zp,loss_mape,loss_total,val_mape_percent\n",
    );
    for l in &logs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            l.epoch,
            l.lr,
            l.tau,
            l.tau_prime,
            l.loss_zz,
            l.loss_pp,
            l.loss_zp,
            l.loss_mape,
            l.loss_total,
            l.val_mape_percent
        ));
    }
    std::fs::write(&log_path, csv)?;

    Ok(TrainResult {
        checkpoint_path,
        log_path,
        initial_val_mape,
        best_val_mape: best_val,
        best_epoch,
        epochs_run: config.epochs,
    })
}
