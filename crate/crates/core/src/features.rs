//! Moment statistics, the parameter-space APE metric, trajectory crops, and
//! positive-pair selection for contrastive training.

use crate::dynamics::{validate_trajectory, SimSpec, SystemLayout, Trajectory};
use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;
use crate::types::ParamVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Hand-designed summary statistics of a trajectory (length `5K` for L96,
/// `d` for KSE).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector(pub Vec<f64>);

impl MomentVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// First and second moments of the L96 channels, concatenated as
/// `[<X>, <Ybar>, <X^2>, <X Ybar>, <Ybar^2>]` with one entry per slow index.
pub fn l96_moments(z: &Trajectory, k_slow: usize, j_fast: usize) -> Result<MomentVector> {
    l96_moments_of(&z.states, k_slow, j_fast)
}

pub fn l96_moments_of(states: &RowMatrix, k_slow: usize, j_fast: usize) -> Result<MomentVector> {
    let d = k_slow * (j_fast + 1);
    if states.cols() != d {
        return Err(CoreError::DimensionMismatch {
            what: "L96 trajectory columns",
            expected: d,
            got: states.cols(),
        });
    }
    let t = states.rows();
    if t == 0 {
        return Err(CoreError::EmptyTrajectory);
    }
    let mut acc = vec![0.0; 5 * k_slow];
    let inv_j = 1.0 / j_fast as f64;
    for i in 0..t {
        let row = states.row(i);
        let (x, y) = row.split_at(k_slow);
        for k in 0..k_slow {
            let ybar = y[k * j_fast..(k + 1) * j_fast].iter().sum::<f64>() * inv_j;
            acc[k] += x[k];
            acc[k_slow + k] += ybar;
            acc[2 * k_slow + k] += x[k] * x[k];
            acc[3 * k_slow + k] += x[k] * ybar;
            acc[4 * k_slow + k] += ybar * ybar;
        }
    }
    let inv_t = 1.0 / t as f64;
    for v in &mut acc {
        *v *= inv_t;
    }
    Ok(MomentVector(acc))
}

/// Per-channel time average of a KSE trajectory (length `d`).
pub fn kse_moments(z: &Trajectory) -> Result<MomentVector> {
    if z.is_empty() {
        return Err(CoreError::EmptyTrajectory);
    }
    Ok(MomentVector(z.states.column_means()))
}

/// Moment vector for whichever system the layout describes.
pub fn moments(states: &RowMatrix, layout: &SystemLayout) -> Result<MomentVector> {
    match *layout {
        SystemLayout::L96 { k_slow, j_fast } => l96_moments_of(states, k_slow, j_fast),
        SystemLayout::Kse { .. } => {
            if states.rows() == 0 {
                return Err(CoreError::EmptyTrajectory);
            }
            Ok(MomentVector(states.column_means()))
        }
    }
}

/// Per-entry variance of the moment vector, estimated by splitting an
/// existing trajectory into `blocks` equal blocks and taking the empirical
/// variance of the per-block moments. Blocks rejected by
/// [`validate_trajectory`]'s criteria are skipped; an error is returned if
/// none survive.
pub fn moment_variance_of_blocks(
    z: &Trajectory,
    layout: &SystemLayout,
    blocks: usize,
) -> Result<Vec<f64>> {
    if blocks < 2 {
        return Err(CoreError::invalid("need at least 2 blocks"));
    }
    let block_len = z.len() / blocks;
    if block_len == 0 {
        return Err(CoreError::invalid(format!(
            "trajectory of length {} cannot be split into {blocks} blocks",
            z.len()
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let block = z.states.row_block(b * block_len, block_len);
        if !block.is_finite() {
            continue;
        }
        rows.push(moments(&block, layout)?.0);
    }
    if rows.is_empty() {
        return Err(CoreError::numerical(
            "all blocks rejected while estimating moment variance",
        ));
    }
    Ok(RowMatrix::from_rows(&rows).column_variances())
}

/// Simulate one long trajectory at `params` and estimate `Var[m(Z)_j]`
/// block-wise. The run covers `blocks * block_len` recorded steps.
pub fn moment_variance(
    spec: &SimSpec,
    params: &[f64],
    block_len: usize,
    blocks: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let z = spec.simulate_from_rng(params, blocks * block_len, rng, 0)?;
    if !validate_trajectory(&z).is_accept() {
        return Err(CoreError::numerical(
            "simulated trajectory rejected while estimating moment variance",
        ));
    }
    moment_variance_of_blocks(&z, &spec.layout, blocks)
}

/// Contiguous random time window of length `len`.
pub fn crop(z: &Trajectory, len: usize, rng: &mut ChaCha12Rng) -> Result<Trajectory> {
    if len == 0 {
        return Err(CoreError::invalid("crop length must be >= 1"));
    }
    if len > z.len() {
        return Err(CoreError::invalid(format!(
            "crop length {len} exceeds trajectory length {}",
            z.len()
        )));
    }
    let start = rng.gen_range(0..=z.len() - len);
    Ok(Trajectory {
        states: z.states.row_block(start, len),
        dt: z.dt,
        meta: z.meta.clone(),
    })
}

/// Default denominator guard for APE/MAPE-style ratios.
pub const APE_EPS: f64 = 1e-6;

/// `APE(other; reference) = sum_l |ref_l - other_l| / (|ref_l| + eps)`.
pub fn ape(reference: &ParamVector, other: &ParamVector, eps: f64) -> f64 {
    assert_eq!(reference.len(), other.len(), "APE dimension mismatch");
    reference
        .as_slice()
        .iter()
        .zip(other.as_slice())
        .map(|(r, o)| (r - o).abs() / (r.abs() + eps))
        .sum()
}

/// Symmetrized APE: `delta(a, b) = (APE(b; a) + APE(a; b)) / 2`.
pub fn delta(a: &ParamVector, b: &ParamVector, eps: f64) -> f64 {
    0.5 * (ape(a, b, eps) + ape(b, a, eps))
}

/// How a positive partner is chosen when the nearest neighbor is too far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivePairRule {
    /// Accept the nearest neighbor only below this symmetric-APE distance.
    pub threshold: f64,
    /// Probability of perturbing the parameters in the fallback branch.
    pub perturb_prob: f64,
    /// Relative std of the multiplicative parameter noise.
    pub perturb_std: f64,
    /// Length of the fresh crop taken in the fallback branch.
    pub crop_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveSource {
    /// Nearest neighbor at this dataset index passed the threshold filter.
    Neighbor { index: usize },
    /// Fallback: fresh crop of the anchor plus (maybe) perturbed parameters.
    Augmented,
}

#[derive(Debug, Clone)]
pub struct PositivePair {
    pub trajectory: Trajectory,
    pub params: ParamVector,
    pub source: PositiveSource,
}

/// Two-step positive selection: nearest neighbor in parameter space under
/// the symmetric APE metric if within `rule.threshold`, otherwise an
/// augmentation of the anchor itself.
pub fn select_positive(
    anchor: usize,
    params: &[ParamVector],
    trajectories: &[Trajectory],
    rule: &PositivePairRule,
    eps: f64,
    rng: &mut ChaCha12Rng,
) -> Result<PositivePair> {
    if params.len() < 2 {
        return Err(CoreError::invalid("positive selection needs >= 2 samples"));
    }
    if params.len() != trajectories.len() {
        return Err(CoreError::DimensionMismatch {
            what: "positive-pair dataset",
            expected: params.len(),
            got: trajectories.len(),
        });
    }

    let mut best = usize::MAX;
    let mut best_delta = f64::INFINITY;
    for j in 0..params.len() {
        if j == anchor {
            continue;
        }
        let d = delta(&params[anchor], &params[j], eps);
        if d < best_delta {
            best_delta = d;
            best = j;
        }
    }
    if best_delta <= rule.threshold {
        return Ok(PositivePair {
            trajectory: trajectories[best].clone(),
            params: params[best].clone(),
            source: PositiveSource::Neighbor { index: best },
        });
    }

    let trajectory = crop(&trajectories[anchor], rule.crop_len, rng)?;
    let mut values = params[anchor].as_slice().to_vec();
    if rng.gen_range(0.0..1.0) < rule.perturb_prob {
        for v in &mut values {
            let xi: f64 = rng.sample(StandardNormal);
            *v += xi * rule.perturb_std * *v;
        }
    }
    Ok(PositivePair {
        trajectory,
        params: ParamVector::new(values),
        source: PositiveSource::Augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{SystemId, TrajectoryMeta};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn toy_trajectory(t: usize, d: usize, mut fill: impl FnMut(usize, usize) -> f64) -> Trajectory {
        let mut states = RowMatrix::zeros(t, d);
        for i in 0..t {
            for j in 0..d {
                states.set(i, j, fill(i, j));
            }
        }
        Trajectory {
            states,
            dt: 0.1,
            meta: TrajectoryMeta {
                system: SystemId::L96,
                params: vec![],
                seed: 0,
                filtered: false,
            },
        }
    }

    #[test]
    fn constant_l96_moments() {
        let (k, j) = (3, 2);
        let (a, b) = (2.0, 0.5);
        let z = toy_trajectory(4, k * (j + 1), |_, col| if col < k { a } else { b });
        let m = l96_moments(&z, k, j).unwrap();
        assert_eq!(m.len(), 5 * k);
        for i in 0..k {
            assert!((m.0[i] - a).abs() < 1e-12);
            assert!((m.0[k + i] - b).abs() < 1e-12);
            assert!((m.0[2 * k + i] - a * a).abs() < 1e-12);
            assert!((m.0[3 * k + i] - a * b).abs() < 1e-12);
            assert!((m.0[4 * k + i] - b * b).abs() < 1e-12);
        }
    }

    #[test]
    fn l96_moment_length_matches_paper_setup() {
        let z = toy_trajectory(2, 36 * 11, |i, j| (i * 7 + j) as f64 * 0.01);
        assert_eq!(l96_moments(&z, 36, 10).unwrap().len(), 180);
    }

    // Brute-force oracle: every block computed with its own explicit loops
    // over (t, k, j).
    #[test]
    fn l96_moments_match_naive_double_loop() {
        let (k_slow, j_fast) = (4, 3);
        let d = k_slow * (j_fast + 1);
        let mut rng = derive_rng(77, &[1]);
        let z = toy_trajectory(10, d, |_, _| rng.gen_range(-2.0..2.0));
        let m = l96_moments(&z, k_slow, j_fast).unwrap();

        let t = z.len() as f64;
        for k in 0..k_slow {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut mxy = 0.0;
            let mut myy = 0.0;
            for i in 0..z.len() {
                let x = z.states.get(i, k);
                let mut ybar = 0.0;
                for jj in 0..j_fast {
                    ybar += z.states.get(i, k_slow + k * j_fast + jj);
                }
                ybar /= j_fast as f64;
                mx += x;
                my += ybar;
                mxx += x * x;
                mxy += x * ybar;
                myy += ybar * ybar;
            }
            assert!((m.0[k] - mx / t).abs() < 1e-12);
            assert!((m.0[k_slow + k] - my / t).abs() < 1e-12);
            assert!((m.0[2 * k_slow + k] - mxx / t).abs() < 1e-12);
            assert!((m.0[3 * k_slow + k] - mxy / t).abs() < 1e-12);
            assert!((m.0[4 * k_slow + k] - myy / t).abs() < 1e-12);
        }
    }

    #[test]
    fn l96_moments_are_time_reversal_invariant() {
        let (k_slow, j_fast) = (3, 2);
        let d = k_slow * (j_fast + 1);
        let mut rng = derive_rng(78, &[1]);
        let z = toy_trajectory(7, d, |_, _| rng.gen_range(-1.0..1.0));
        let rev_rows: Vec<Vec<f64>> = (0..z.len()).rev().map(|i| z.states.row(i).to_vec()).collect();
        let reversed = Trajectory {
            states: RowMatrix::from_rows(&rev_rows),
            dt: z.dt,
            meta: z.meta.clone(),
        };
        let a = l96_moments(&z, k_slow, j_fast).unwrap();
        let b = l96_moments(&reversed, k_slow, j_fast).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kse_moments_basics() {
        let z = toy_trajectory(3, 4, |_, _| 1.25);
        assert_eq!(kse_moments(&z).unwrap().0, vec![1.25; 4]);

        let two = toy_trajectory(2, 2, |i, j| if i == 0 { [1.0, 2.0][j] } else { [3.0, 6.0][j] });
        assert_eq!(kse_moments(&two).unwrap().0, vec![2.0, 4.0]);

        let wide = toy_trajectory(2, 256, |i, j| (i + j) as f64);
        assert_eq!(kse_moments(&wide).unwrap().len(), 256);
    }

    #[test]
    fn block_variance_two_sample_formula() {
        // Two blocks of one row each: per-entry variance is the two-point
        // population variance.
        let z = toy_trajectory(2, 3, |i, j| if i == 0 { [1.0, 2.0, 3.0][j] } else { [3.0, 2.0, 7.0][j] });
        let layout = SystemLayout::Kse {
            dim: 3,
            half_period: 1.0,
        };
        let vars = moment_variance_of_blocks(&z, &layout, 2).unwrap();
        // u = [1,2,3], w = [3,2,7], m = (u+w)/2 -> var = ((u-m)^2+(w-m)^2)/2
        assert_eq!(vars, vec![1.0, 0.0, 4.0]);
    }

    #[test]
    fn constant_dynamics_have_zero_moment_variance() {
        let z = toy_trajectory(20, 2, |_, j| j as f64);
        let layout = SystemLayout::Kse {
            dim: 2,
            half_period: 1.0,
        };
        let vars = moment_variance_of_blocks(&z, &layout, 4).unwrap();
        assert_eq!(vars, vec![0.0, 0.0]);
    }

    #[test]
    fn chaotic_l96_moment_variance_is_positive() {
        use crate::dynamics::Substeps;
        let spec = SimSpec {
            layout: SystemLayout::L96 {
                k_slow: 4,
                j_fast: 2,
            },
            dt: 0.1,
            substeps: Substeps::Fixed(50),
            burn_in: 0,
        };
        let mut rng = derive_rng(5, &[2]);
        let vars = moment_variance(&spec, &[10.0, 1.0, 10.0, 10.0], 40, 10, &mut rng).unwrap();
        assert!(vars.iter().all(|v| *v > 0.0), "{vars:?}");
    }

    #[test]
    fn crop_shapes_and_identity() {
        let z = toy_trajectory(1000, 5, |i, j| (i * 5 + j) as f64);
        let mut rng = derive_rng(9, &[3]);
        let full = crop(&z, 1000, &mut rng).unwrap();
        assert_eq!(full.states, z.states);

        for _ in 0..20 {
            let c = crop(&z, 250, &mut rng).unwrap();
            assert_eq!(c.len(), 250);
            assert_eq!(c.dim(), 5);
            assert_eq!(c.dt, z.dt);
            // Start index is encoded in the first entry by construction.
            let start = c.states.get(0, 0) as usize / 5;
            assert!(start <= 750);
        }
        assert!(crop(&z, 1001, &mut rng).is_err());
    }

    #[test]
    fn ape_and_delta_closed_forms() {
        let a = ParamVector::new(vec![1.0, 1.0]);
        let b = ParamVector::new(vec![2.0, 1.0]);
        assert_eq!(ape(&a, &b, 0.0), 1.0);
        assert_eq!(ape(&b, &a, 0.0), 0.5);
        assert_eq!(delta(&a, &b, 0.0), 0.75);
        assert_eq!(delta(&a, &a, 0.0), 0.0);
    }

    #[test]
    fn delta_is_symmetric_nonnegative() {
        let mut rng = derive_rng(13, &[4]);
        for _ in 0..50 {
            let a = ParamVector::new((0..4).map(|_| rng.gen_range(-10.0..10.0)).collect());
            let b = ParamVector::new((0..4).map(|_| rng.gen_range(-10.0..10.0)).collect());
            let dab = delta(&a, &b, APE_EPS);
            let dba = delta(&b, &a, APE_EPS);
            assert!((dab - dba).abs() < 1e-12);
            assert!(dab >= 0.0);
        }
    }

    #[test]
    fn select_positive_prefers_duplicates() {
        let params = vec![
            ParamVector::new(vec![1.0, 2.0]),
            ParamVector::new(vec![5.0, 5.0]),
            ParamVector::new(vec![1.0, 2.0]),
        ];
        let trajs: Vec<Trajectory> = (0..3).map(|i| toy_trajectory(10, 2, |t, c| (i + t + c) as f64)).collect();
        let rule = PositivePairRule {
            threshold: 0.4,
            perturb_prob: 0.5,
            perturb_std: 0.04,
            crop_len: 5,
        };
        let mut rng = derive_rng(1, &[5]);
        let pair = select_positive(0, &params, &trajs, &rule, APE_EPS, &mut rng).unwrap();
        assert_eq!(pair.source, PositiveSource::Neighbor { index: 2 });
        assert_eq!(pair.params, params[2]);
    }

    #[test]
    fn select_positive_falls_back_to_augmentation() {
        let params = vec![
            ParamVector::new(vec![1.0, 1.0]),
            ParamVector::new(vec![100.0, 100.0]),
        ];
        let trajs: Vec<Trajectory> = (0..2).map(|i| toy_trajectory(10, 2, |t, c| (i * 100 + t * 2 + c) as f64)).collect();
        let rule = PositivePairRule {
            threshold: 0.4,
            perturb_prob: 1.0,
            perturb_std: 0.04,
            crop_len: 5,
        };
        let mut rng = derive_rng(2, &[6]);
        let pair = select_positive(0, &params, &trajs, &rule, APE_EPS, &mut rng).unwrap();
        assert_eq!(pair.source, PositiveSource::Augmented);
        assert_eq!(pair.trajectory.len(), 5);
        // Perturbation is multiplicative and small.
        for (p, orig) in pair.params.as_slice().iter().zip(params[0].as_slice()) {
            assert!((p - orig).abs() < 0.5 * orig.abs().max(1.0));
            assert_ne!(p, orig);
        }

        // With perturb_prob = 0 the parameters come back unchanged.
        let rule0 = PositivePairRule {
            perturb_prob: 0.0,
            ..rule
        };
        let pair0 = select_positive(0, &params, &trajs, &rule0, APE_EPS, &mut rng).unwrap();
        assert_eq!(pair0.params, params[0]);
    }

    #[test]
    fn select_positive_never_returns_anchor() {
        let mut rng = derive_rng(3, &[7]);
        let params: Vec<ParamVector> = (0..6)
            .map(|_| ParamVector::new((0..3).map(|_| rng.gen_range(0.5..5.0)).collect()))
            .collect();
        let trajs: Vec<Trajectory> = (0..6).map(|i| toy_trajectory(8, 2, |t, c| (i + t + c) as f64)).collect();
        let rule = PositivePairRule {
            threshold: f64::INFINITY,
            perturb_prob: 0.5,
            perturb_std: 0.04,
            crop_len: 4,
        };
        for anchor in 0..6 {
            let pair = select_positive(anchor, &params, &trajs, &rule, APE_EPS, &mut rng).unwrap();
            match pair.source {
                PositiveSource::Neighbor { index } => assert_ne!(index, anchor),
                PositiveSource::Augmented => {}
            }
        }
    }
}
