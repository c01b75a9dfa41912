//! Training losses, the FIFO memory bank of negative embeddings, and the
//! temperature schedule.
//!
//! All losses are built on the autodiff tape so gradients flow into both
//! networks. InfoNCE terms use a softmax denominator of the positive pair
//! plus stored bank negatives; the anchor's own self-similarity is excluded.
//! The cross-modal alignment loss is the symmetric two-direction variant
//! with in-batch negatives plus both banks.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::linalg::RowMatrix;
use crate::types::UNIT_NORM_TOL;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// FIFO queue of unit-norm embeddings used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queue: VecDeque<Vec<f64>>,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            queue: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Append one embedding, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(CoreError::DimensionMismatch {
                what: "memory bank embedding",
                expected: self.dim,
                got: embedding.len(),
            });
        }
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(CoreError::invalid(format!(
                "memory bank insert with norm {norm}, expected unit"
            )));
        }
        self.queue.push_back(embedding.to_vec());
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }

    /// Append a `(B, p)` batch of embeddings in row order.
    pub fn update(&mut self, embeddings: &Tensor) -> Result<()> {
        let shape = embeddings.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(CoreError::DimensionMismatch {
                what: "memory bank batch",
                expected: self.dim,
                got: *shape.last().unwrap_or(&0),
            });
        }
        for r in 0..shape[0] {
            self.push(&embeddings.data()[r * self.dim..(r + 1) * self.dim])?;
        }
        Ok(())
    }

    /// Snapshot as an `(N, p)` tensor; `None` when empty.
    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.queue.is_empty() {
            return None;
        }
        let mut data = Vec::with_capacity(self.queue.len() * self.dim);
        for row in &self.queue {
            data.extend_from_slice(row);
        }
        Some(Tensor::from_vec(&[self.queue.len(), self.dim], data))
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }
}

/// Heating-up temperature schedule: `tau` holds at `tau0`, then ramps
/// linearly to `tau_max` by the final epoch. `tau_prime` stays fixed unless
/// a ramp window is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_max: f64,
    pub hold_epochs: usize,
    pub total_epochs: usize,
    pub tau_prime: f64,
    #[serde(default)]
    pub tau_prime_ramp: Option<TauPrimeRamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauPrimeRamp {
    pub start_epoch: usize,
    pub end_epoch: usize,
    pub max: f64,
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tau0 <= 0.0 || self.tau_prime <= 0.0 {
            return Err(CoreError::config("temperatures must be positive"));
        }
        if self.tau_max < self.tau0 {
            return Err(CoreError::config("tau_max must be >= tau0"));
        }
        if let Some(r) = &self.tau_prime_ramp {
            if r.end_epoch <= r.start_epoch {
                return Err(CoreError::config("tau_prime ramp window is empty"));
            }
        }
        Ok(())
    }
}

/// `(tau, tau_prime)` in effect at the given epoch.
pub fn temperature_at(epoch: usize, sched: &TemperatureSchedule) -> (f64, f64) {
    let tau = if epoch <= sched.hold_epochs || sched.total_epochs <= sched.hold_epochs {
        sched.tau0
    } else {
        let span = (sched.total_epochs - sched.hold_epochs) as f64;
        let t = (epoch - sched.hold_epochs) as f64 / span;
        sched.tau0 + (sched.tau_max - sched.tau0) * t.min(1.0)
    };
    let tau_prime = match &sched.tau_prime_ramp {
        None => sched.tau_prime,
        Some(r) => {
            if epoch <= r.start_epoch {
                sched.tau_prime
            } else if epoch >= r.end_epoch {
                r.max
            } else {
                let t = (epoch - r.start_epoch) as f64 / (r.end_epoch - r.start_epoch) as f64;
                sched.tau_prime + (r.max - sched.tau_prime) * t
            }
        }
    };
    (tau, tau_prime)
}

/// Relative weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_weight")]
    pub zz: f64,
    #[serde(default = "default_weight")]
    pub pp: f64,
    #[serde(default = "default_weight")]
    pub zp: f64,
    #[serde(default = "default_weight")]
    pub mape: f64,
}

fn default_weight() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            zz: 1.0,
            pp: 1.0,
            zp: 1.0,
            mape: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.zz, self.pp, self.zp, self.mape];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::config("loss weights must be finite and >= 0"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(CoreError::config("at least one loss weight must be > 0"));
        }
        Ok(())
    }
}

fn check_pair(g: &Graph, anchors: NodeId, positives: NodeId) -> Result<(usize, usize)> {
    let a = g.value(anchors).shape();
    let p = g.value(positives).shape();
    if a.len() != 2 || p.len() != 2 || a != p {
        return Err(CoreError::invalid(format!(
            "anchor/positive batches misaligned: {a:?} vs {p:?}"
        )));
    }
    if a[0] == 0 {
        return Err(CoreError::invalid("empty batch"));
    }
    Ok((a[0], a[1]))
}

/// InfoNCE over one modality: positive similarity against bank negatives.
/// With an empty bank the loss is exactly zero when anchor == positive.
pub fn info_nce(
    g: &mut Graph,
    anchors: NodeId,
    positives: NodeId,
    negatives: Option<NodeId>,
    tau: f64,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(CoreError::invalid("tau must be positive"));
    }
    let (_, dim) = check_pair(g, anchors, positives)?;
    let s_pos = g.rows_dot(anchors, positives);
    let s_pos = g.scalar_mul(s_pos, 1.0 / tau);
    let logits = match negatives {
        Some(bank) => {
            let bs = g.value(bank).shape();
            if bs.len() != 2 || bs[1] != dim {
                return Err(CoreError::DimensionMismatch {
                    what: "negative bank",
                    expected: dim,
                    got: *bs.last().unwrap_or(&0),
                });
            }
            let s_neg = g.matmul_nt(anchors, bank);
            let s_neg = g.scalar_mul(s_neg, 1.0 / tau);
            g.concat_cols(&[s_pos, s_neg])
        }
        None => s_pos,
    };
    let lse = g.logsumexp_rows(logits);
    let per_anchor = g.sub(lse, s_pos);
    Ok(g.mean_all(per_anchor))
}

/// Symmetric two-direction alignment loss over matched `(Z_i, phi_i)` pairs.
/// Each direction scores its positive against the in-batch cross terms plus
/// the opposite modality's bank.
pub fn clip_loss(
    g: &mut Graph,
    z_emb: NodeId,
    p_emb: NodeId,
    z_bank: Option<NodeId>,
    p_bank: Option<NodeId>,
    tau_prime: f64,
) -> Result<NodeId> {
    if tau_prime <= 0.0 {
        return Err(CoreError::invalid("tau_prime must be positive"));
    }
    let (_, dim) = check_pair(g, z_emb, p_emb)?;
    for bank in [z_bank, p_bank].into_iter().flatten() {
        let bs = g.value(bank).shape();
        if bs.len() != 2 || bs[1] != dim {
            return Err(CoreError::DimensionMismatch {
                what: "alignment bank",
                expected: dim,
                got: *bs.last().unwrap_or(&0),
            });
        }
    }
    let inv = 1.0 / tau_prime;
    let s_pos = g.rows_dot(z_emb, p_emb);
    let s_pos = g.scalar_mul(s_pos, inv);

    let direction = |g: &mut Graph, a: NodeId, b: NodeId, bank: Option<NodeId>| -> NodeId {
        let s = g.matmul_nt(a, b);
        let s = g.scalar_mul(s, inv);
        let logits = match bank {
            Some(bk) => {
                let sb = g.matmul_nt(a, bk);
                let sb = g.scalar_mul(sb, inv);
                g.concat_cols(&[s, sb])
            }
            None => s,
        };
        g.logsumexp_rows(logits)
    };

    let lse_z = direction(g, z_emb, p_emb, p_bank);
    let lse_p = direction(g, p_emb, z_emb, z_bank);
    let term_z = g.sub(lse_z, s_pos);
    let term_p = g.sub(lse_p, s_pos);
    let both = g.add(term_z, term_p);
    Ok(g.mean_all(both))
}

/// Mean absolute percentage error of the regression head:
/// `(1/n) sum_i sum_j |truth_ij - pred_ij| / (|truth_ij| + eps)`.
pub fn mape_loss(g: &mut Graph, predictions: NodeId, truths: &RowMatrix, eps: f64) -> Result<NodeId> {
    let shape = g.value(predictions).shape().to_vec();
    if shape.len() != 2 || shape[0] != truths.rows() || shape[1] != truths.cols() {
        return Err(CoreError::invalid(format!(
            "prediction shape {shape:?} does not match truths ({}, {})",
            truths.rows(),
            truths.cols()
        )));
    }
    let k = truths.cols();
    let truth_node = g.constant(Tensor::from_vec(
        &[truths.rows(), k],
        truths.data().to_vec(),
    ));
    let weights: Vec<f64> = truths.data().iter().map(|v| 1.0 / (v.abs() + eps)).collect();
    let w_node = g.constant(Tensor::from_vec(&[truths.rows(), k], weights));
    let diff = g.sub(predictions, truth_node);
    let a = g.abs(diff);
    let weighted = g.mul(a, w_node);
    // mean over all entries times k = mean over rows of per-row sums.
    let m = g.mean_all(weighted);
    Ok(g.scalar_mul(m, k as f64))
}

/// Scalar loss components in graph form.
pub struct LossTerms {
    pub zz: Option<NodeId>,
    pub pp: Option<NodeId>,
    pub zp: Option<NodeId>,
    pub mape: Option<NodeId>,
}

/// Weighted total. Missing components are treated as zero.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<NodeId> {
    weights.validate()?;
    let mut parts = Vec::new();
    if let Some(id) = terms.zz {
        parts.push((id, weights.zz));
    }
    if let Some(id) = terms.pp {
        parts.push((id, weights.pp));
    }
    if let Some(id) = terms.zp {
        parts.push((id, weights.zp));
    }
    if let Some(id) = terms.mape {
        parts.push((id, weights.mape));
    }
    if parts.is_empty() {
        return Err(CoreError::invalid("total loss needs at least one component"));
    }
    Ok(g.weighted_sum(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn info_nce_single_negative_closed_form() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let p = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let n = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]));
        let loss = info_nce(&mut g, a, p, Some(n), 1.0).unwrap();
        let expected = -(1.0_f64.exp() / (1.0_f64.exp() + 1.0)).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn info_nce_no_negatives_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let p = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let loss = info_nce(&mut g, a, p, None, 0.5).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn info_nce_decreases_as_positive_similarity_grows() {
        let eval = |cos: f64| -> f64 {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
            let p = g.constant(Tensor::from_vec(
                &[1, 2],
                vec![cos, (1.0 - cos * cos).sqrt()],
            ));
            let n = g.constant(Tensor::from_vec(&[1, 2], unit(vec![0.3, -0.8])));
            let loss = info_nce(&mut g, a, p, Some(n), 0.7).unwrap();
            g.value(loss).item()
        };
        assert!(eval(0.9) < eval(0.5));
        assert!(eval(0.5) < eval(0.0));
    }

    #[test]
    fn info_nce_invariant_under_negative_permutation() {
        let mut rng = derive_rng(4, &[1]);
        let negs: Vec<Vec<f64>> = (0..5)
            .map(|_| unit((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let eval = |order: &[usize]| -> f64 {
            let mut g = Graph::new();
            let a = g.constant(Tensor::from_vec(&[1, 3], unit(vec![0.2, 0.5, -0.1])));
            let p = g.constant(Tensor::from_vec(&[1, 3], unit(vec![0.3, 0.4, 0.0])));
            let data: Vec<f64> = order.iter().flat_map(|&i| negs[i].clone()).collect();
            let n = g.constant(Tensor::from_vec(&[5, 3], data));
            let loss = info_nce(&mut g, a, p, Some(n), 0.3).unwrap();
            g.value(loss).item()
        };
        let forward = eval(&[0, 1, 2, 3, 4]);
        let shuffled = eval(&[3, 0, 4, 2, 1]);
        assert!((forward - shuffled).abs() < 1e-12);
    }

    #[test]
    fn clip_two_pair_closed_form() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let p = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let loss = clip_loss(&mut g, z, p, None, None, 1.0).unwrap();
        let expected = 2.0 * -(1.0_f64.exp() / (1.0_f64.exp() + 1.0)).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn clip_single_pair_no_negatives_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[1, 3], unit(vec![0.1, 0.2, 0.3])));
        let p = g.constant(Tensor::from_vec(&[1, 3], unit(vec![0.1, 0.2, 0.3])));
        let loss = clip_loss(&mut g, z, p, None, None, 0.15).unwrap();
        assert!(g.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn clip_is_modality_symmetric() {
        let mut rng = derive_rng(4, &[2]);
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| -> Vec<f64> {
            unit((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let za: Vec<f64> = [mk(&mut rng), mk(&mut rng), mk(&mut rng)].concat();
        let pa: Vec<f64> = [mk(&mut rng), mk(&mut rng), mk(&mut rng)].concat();
        let eval = |first: &[f64], second: &[f64]| -> f64 {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(&[3, 4], first.to_vec()));
            let p = g.constant(Tensor::from_vec(&[3, 4], second.to_vec()));
            let loss = clip_loss(&mut g, z, p, None, None, 0.4).unwrap();
            g.value(loss).item()
        };
        assert!((eval(&za, &pa) - eval(&pa, &za)).abs() < 1e-12);
    }

    #[test]
    fn mape_loss_values() {
        let truths = RowMatrix::from_vec(1, 4, vec![10.0, 1.0, 10.0, 10.0]);
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(&[1, 4], vec![11.0, 1.0, 10.0, 10.0]));
        let loss = mape_loss(&mut g, pred, &truths, 0.0).unwrap();
        assert!((g.value(loss).item() - 0.1).abs() < 1e-12);

        let mut g2 = Graph::new();
        let exact = g2.constant(Tensor::from_vec(&[1, 4], vec![10.0, 1.0, 10.0, 10.0]));
        let zero = mape_loss(&mut g2, exact, &truths, 0.0).unwrap();
        assert_eq!(g2.value(zero).item(), 0.0);

        // Doubling one component's error doubles its contribution.
        let mut g3 = Graph::new();
        let pred3 = g3.constant(Tensor::from_vec(&[1, 4], vec![12.0, 1.0, 10.0, 10.0]));
        let loss3 = mape_loss(&mut g3, pred3, &truths, 0.0).unwrap();
        assert!((g3.value(loss3).item() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let truths = RowMatrix::from_vec(1, 2, vec![2.0, 4.0]);
        let mut g = Graph::new();
        let pred = g.constant(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]));
        let mape = mape_loss(&mut g, pred, &truths, 0.0).unwrap();
        let terms = LossTerms {
            zz: None,
            pp: None,
            zp: None,
            mape: Some(mape),
        };
        let w = LossWeights {
            zz: 0.0,
            pp: 0.0,
            zp: 0.0,
            mape: 1.0,
        };
        let total = total_loss(&mut g, &terms, &w).unwrap();
        assert_eq!(g.value(total).item(), g.value(mape).item());

        let w2 = LossWeights {
            mape: 2.5,
            ..LossWeights::default()
        };
        let total2 = total_loss(&mut g, &terms, &w2).unwrap();
        assert!((g.value(total2).item() - 2.5 * g.value(mape).item()).abs() < 1e-12);

        assert!(LossWeights {
            zz: 0.0,
            pp: 0.0,
            zp: 0.0,
            mape: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bank_fifo_semantics() {
        let mut bank = MemoryBank::new(3, 2);
        for v in [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]] {
            bank.push(&v).unwrap();
        }
        assert_eq!(bank.len(), 3);
        let rows: Vec<&[f64]> = bank.iter().collect();
        assert_eq!(rows[0], &[0.0, 1.0]);
        assert_eq!(rows[2], &[0.0, -1.0]);
    }

    #[test]
    fn bank_rejects_non_unit_inserts() {
        let mut bank = MemoryBank::new(2, 2);
        assert!(bank.push(&[0.5, 0.5]).is_err());
        assert!(bank.push(&[1.0, 0.0]).is_ok());
    }

    #[test]
    fn bank_matches_reference_fifo_model() {
        let mut rng = derive_rng(6, &[3]);
        for trial in 0..200 {
            let capacity = rng.gen_range(1..8);
            let mut bank = MemoryBank::new(capacity, 2);
            let mut model: VecDeque<Vec<f64>> = VecDeque::new();
            for _ in 0..rng.gen_range(1..40) {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = vec![angle.cos(), angle.sin()];
                bank.push(&v).unwrap();
                model.push_back(v);
                while model.len() > capacity {
                    model.pop_front();
                }
            }
            assert!(bank.len() <= capacity);
            let got: Vec<Vec<f64>> = bank.iter().map(|r| r.to_vec()).collect();
            let want: Vec<Vec<f64>> = model.into_iter().collect();
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn temperature_schedule_paper_values() {
        let sched = TemperatureSchedule {
            tau0: 0.15,
            tau_max: 0.5,
            hold_epochs: 500,
            total_epochs: 1000,
            tau_prime: 0.15,
            tau_prime_ramp: None,
        };
        assert_eq!(temperature_at(0, &sched).0, 0.15);
        assert_eq!(temperature_at(500, &sched).0, 0.15);
        assert!((temperature_at(750, &sched).0 - 0.325).abs() < 1e-12);
        assert!((temperature_at(1000, &sched).0 - 0.5).abs() < 1e-12);
        for e in [0, 250, 750, 1000] {
            assert_eq!(temperature_at(e, &sched).1, 0.15);
        }
    }

    #[test]
    fn tau_prime_ramp_for_kse_variant() {
        let sched = TemperatureSchedule {
            tau0: 0.1,
            tau_max: 0.5,
            hold_epochs: 500,
            total_epochs: 1000,
            tau_prime: 0.1,
            tau_prime_ramp: Some(TauPrimeRamp {
                start_epoch: 500,
                end_epoch: 900,
                max: 0.6,
            }),
        };
        assert_eq!(temperature_at(100, &sched).1, 0.1);
        assert_eq!(temperature_at(500, &sched).1, 0.1);
        assert!((temperature_at(700, &sched).1 - 0.35).abs() < 1e-12);
        assert_eq!(temperature_at(900, &sched).1, 0.6);
        assert_eq!(temperature_at(1000, &sched).1, 0.6);
    }
}
