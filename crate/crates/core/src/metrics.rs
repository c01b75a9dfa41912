//! Evaluation metrics, the affine probe diagnostic, and objective-landscape
//! heatmap grids.

use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

/// Per-component mean and median absolute percentage error, in percent.
pub fn mape_mdape(
    estimates: &RowMatrix,
    truths: &RowMatrix,
    eps: f64,
) -> Result<Vec<(f64, f64)>> {
    if estimates.rows() != truths.rows() || estimates.cols() != truths.cols() {
        return Err(CoreError::invalid(format!(
            "estimate batch ({}, {}) does not match truths ({}, {})",
            estimates.rows(),
            estimates.cols(),
            truths.rows(),
            truths.cols()
        )));
    }
    if estimates.rows() == 0 {
        return Err(CoreError::invalid("empty estimate batch"));
    }
    let n = estimates.rows();
    let k = estimates.cols();
    let mut out = Vec::with_capacity(k);
    let mut apes = vec![0.0; n];
    for j in 0..k {
        for i in 0..n {
            let t = truths.get(i, j);
            apes[i] = 100.0 * (estimates.get(i, j) - t).abs() / (t.abs() + eps);
        }
        let mean = apes.iter().sum::<f64>() / n as f64;
        let mut sorted = apes.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        out.push((mean, median));
    }
    Ok(out)
}

/// Empirical CRPS of an ensemble against a scalar truth:
/// `-(1/2M^2) sum_mm' |x_m - x_m'| + (1/M) sum_m |x_m - truth|`.
pub fn crps_empirical(particles: &[f64], truth: f64) -> f64 {
    let m = particles.len();
    assert!(m >= 1, "CRPS needs at least one particle");
    let mut pair_sum = 0.0;
    for a in particles {
        for b in particles {
            pair_sum += (a - b).abs();
        }
    }
    let err_sum: f64 = particles.iter().map(|v| (v - truth).abs()).sum();
    let mf = m as f64;
    -pair_sum / (2.0 * mf * mf) + err_sum / mf
}

/// Least-squares affine fit from embeddings to parameters, with per-component
/// R^2 reported on an internal held-out third of the batch.
#[derive(Debug, Clone)]
pub struct AffineProbe {
    /// `(p + 1) x k` map (last row is the intercept).
    pub weights: RowMatrix,
    /// Per-component R^2 on the evaluation split; can be negative.
    pub r_squared: Vec<f64>,
    /// Set when the design matrix was rank-deficient and the fit fell back
    /// to the pseudo-inverse.
    pub rank_deficient: bool,
}

impl AffineProbe {
    /// Apply the fitted map to one embedding.
    pub fn predict(&self, embedding: &[f64]) -> Vec<f64> {
        let p = self.weights.rows() - 1;
        let k = self.weights.cols();
        assert_eq!(embedding.len(), p, "embedding dimension mismatch");
        let mut out = self.weights.row(p).to_vec();
        for (i, &e) in embedding.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate().take(k) {
                *o += e * self.weights.get(i, j);
            }
        }
        out
    }
}

pub fn affine_probe(embeddings: &RowMatrix, params: &RowMatrix) -> Result<AffineProbe> {
    let n = embeddings.rows();
    let p = embeddings.cols();
    let k = params.cols();
    if params.rows() != n {
        return Err(CoreError::invalid("embedding/parameter batch mismatch"));
    }
    if n <= k + 1 {
        return Err(CoreError::invalid(format!(
            "affine probe needs more than k + 1 = {} samples, got {n}",
            k + 1
        )));
    }
    let n_fit = ((2 * n).div_ceil(3)).max(k + 2).min(n);
    let design = |rows: std::ops::Range<usize>| -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), p + 1, |r, c| {
            let i = rows.start + r;
            if c < p {
                embeddings.get(i, c)
            } else {
                1.0
            }
        })
    };
    let x_fit = design(0..n_fit);
    let y_fit = DMatrix::from_fn(n_fit, k, |r, c| params.get(r, c));

    let svd = x_fit.clone().svd(true, true);
    let s_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = 1e-12 * s_max.max(1.0);
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    let rank_deficient = rank < p + 1;
    let coeffs = svd
        .solve(&y_fit, tol)
        .map_err(|e| CoreError::numerical(format!("affine probe solve failed: {e}")))?;

    let weights = RowMatrix::from_vec(
        p + 1,
        k,
        (0..(p + 1) * k)
            .map(|idx| coeffs[(idx / k, idx % k)])
            .collect(),
    );

    // R^2 on the held-out tail (the whole batch when nothing is left over).
    let eval_range = if n_fit < n { n_fit..n } else { 0..n };
    let x_eval = design(eval_range.clone());
    let pred = &x_eval * &coeffs;
    let mut r_squared = Vec::with_capacity(k);
    let n_eval = eval_range.len();
    for j in 0..k {
        let mean: f64 = eval_range
            .clone()
            .map(|i| params.get(i, j))
            .sum::<f64>()
            / n_eval as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for (r, i) in eval_range.clone().enumerate() {
            let y = params.get(i, j);
            ss_res += (y - pred[(r, j)]) * (y - pred[(r, j)]);
            ss_tot += (y - mean) * (y - mean);
        }
        let r2 = if ss_tot > 1e-30 {
            1.0 - ss_res / ss_tot
        } else if ss_res < 1e-20 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        r_squared.push(r2);
    }
    Ok(AffineProbe {
        weights,
        r_squared,
        rank_deficient,
    })
}

/// Objective values over a uniform grid on two free components, the others
/// held at the truth. Values above `clip_threshold` are clipped and flagged;
/// the argmin is taken on the raw values with lowest-linear-index ties.
#[derive(Debug, Clone)]
pub struct HeatmapGrid {
    pub pair: (usize, usize),
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub values: RowMatrix,
    pub clipped: Vec<bool>,
    pub argmin: (usize, usize),
    pub truth_cell: (usize, usize),
    pub clip_threshold: Option<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn nearest_index(axis: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, a) in axis.iter().enumerate() {
        let d = (a - v).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Evaluate `objective(point, cell_id)` over the grid. The cell id feeds the
/// caller's RNG-stream derivation so parallel evaluation stays reproducible.
pub fn heatmap_grid<F>(
    objective: F,
    truth: &[f64],
    pair: (usize, usize),
    ranges: [(f64, f64); 2],
    resolution: usize,
    clip_threshold: Option<f64>,
) -> Result<HeatmapGrid>
where
    F: Fn(&[f64], u64) -> f64 + Sync,
{
    let (p1, p2) = pair;
    if p1 == p2 || p1 >= truth.len() || p2 >= truth.len() {
        return Err(CoreError::invalid("heatmap needs two distinct free indexes"));
    }
    if resolution < 2 {
        return Err(CoreError::invalid("heatmap resolution must be >= 2"));
    }
    let axis1 = linspace(ranges[0].0, ranges[0].1, resolution);
    let axis2 = linspace(ranges[1].0, ranges[1].1, resolution);

    let raw: Vec<f64> = (0..resolution * resolution)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / resolution, cell % resolution);
            let mut point = truth.to_vec();
            point[p1] = axis1[i];
            point[p2] = axis2[j];
            objective(&point, cell as u64)
        })
        .collect();

    let mut argmin_cell = 0;
    let mut best = f64::INFINITY;
    for (cell, &v) in raw.iter().enumerate() {
        if v < best {
            best = v;
            argmin_cell = cell;
        }
    }
    let mut clipped = vec![false; raw.len()];
    let mut values = raw;
    if let Some(t) = clip_threshold {
        for (v, c) in values.iter_mut().zip(&mut clipped) {
            if *v > t {
                *v = t;
                *c = true;
            }
        }
    }
    Ok(HeatmapGrid {
        pair,
        truth_cell: (
            nearest_index(&axis1, truth[p1]),
            nearest_index(&axis2, truth[p2]),
        ),
        argmin: (argmin_cell / resolution, argmin_cell % resolution),
        axis1,
        axis2,
        values: RowMatrix::from_vec(resolution, resolution, values),
        clipped,
        clip_threshold,
    })
}

impl HeatmapGrid {
    /// CSV export, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p1,p2,value,clipped\n");
        let res = self.axis2.len();
        for (i, a) in self.axis1.iter().enumerate() {
            for (j, b) in self.axis2.iter().enumerate() {
                out.push_str(&format!(
                    "{a},{b},{},{}\n",
                    self.values.get(i, j),
                    self.clipped[i * res + j]
                ));
            }
        }
        out
    }
}

/// Per-component point-estimate and ensemble metrics for one method.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub components: Vec<String>,
    /// Mean absolute percentage error, percent.
    pub mape: Vec<f64>,
    /// Median absolute percentage error, percent.
    pub mdape: Vec<f64>,
    /// Mean CRPS over instances; empty when no ensembles were given.
    pub crps: Vec<f64>,
    pub count: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,mape_percent,mdape_percent,crps\n");
        for (j, name) in self.components.iter().enumerate() {
            let crps = self
                .crps
                .get(j)
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{name},{},{},{crps}\n", self.mape[j], self.mdape[j]));
        }
        out
    }
}

/// Build a report from point estimates plus (optionally) one final ensemble
/// per instance. Missing ensembles fall back to singleton ensembles at the
/// point estimate, for which CRPS reduces to the absolute error.
pub fn evaluate(
    method: &str,
    components: &[String],
    estimates: &RowMatrix,
    truths: &RowMatrix,
    ensembles: Option<&[RowMatrix]>,
    eps: f64,
) -> Result<EvalReport> {
    let stats = mape_mdape(estimates, truths, eps)?;
    let n = estimates.rows();
    let k = estimates.cols();
    if let Some(list) = ensembles {
        if list.len() != n {
            return Err(CoreError::invalid(format!(
                "expected {n} ensembles, got {}",
                list.len()
            )));
        }
    }
    let mut crps = vec![0.0; k];
    for i in 0..n {
        for (j, c) in crps.iter_mut().enumerate() {
            let value = match ensembles {
                Some(list) => crps_empirical(&list[i].column(j), truths.get(i, j)),
                None => crps_empirical(&[estimates.get(i, j)], truths.get(i, j)),
            };
            *c += value;
        }
    }
    for c in &mut crps {
        *c /= n as f64;
    }
    Ok(EvalReport {
        method: method.to_string(),
        components: components.to_vec(),
        mape: stats.iter().map(|(m, _)| *m).collect(),
        mdape: stats.iter().map(|(_, m)| *m).collect(),
        crps,
        count: n,
    })
}
