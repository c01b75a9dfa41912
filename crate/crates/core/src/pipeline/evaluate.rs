//! Evaluation of point estimates and posterior ensembles against ground
//! truth, producing JSON and CSV reports.

use super::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::linalg::RowMatrix;
use crate::metrics::{evaluate, EvalReport};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Parse an `instance,<values...>` CSV into (header, ordered rows).
pub fn read_instance_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<f64>)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CoreError::invalid(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let instance: usize = parts
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| {
                CoreError::invalid(format!("bad instance id at {}:{}", path.display(), lineno + 2))
            })?;
        let values: Vec<f64> = parts
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    CoreError::invalid(format!("bad number at {}:{}", path.display(), lineno + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() + 1 != header.len() {
            return Err(CoreError::invalid(format!(
                "row width mismatch at {}:{}",
                path.display(),
                lineno + 2
            )));
        }
        rows.push((instance, values));
    }
    Ok((header, rows))
}

/// Final-iteration particles from an `iteration,particle,<components>` CSV.
pub fn read_final_ensemble(path: &Path) -> Result<RowMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::invalid(format!("{} is empty", path.display())))?;
    let k = header.split(',').count() - 2;
    let mut last_iter = 0usize;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let iter: usize = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| CoreError::invalid(format!("bad iteration in {}", path.display())))?;
        let _particle = parts.next();
        let values: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CoreError::invalid(format!("bad number in {}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != k {
            return Err(CoreError::invalid(format!(
                "row width mismatch in {}",
                path.display()
            )));
        }
        if iter > last_iter {
            last_iter = iter;
            rows.clear();
        }
        if iter == last_iter {
            rows.push(values);
        }
    }
    if rows.is_empty() {
        return Err(CoreError::invalid(format!(
            "no particles found in {}",
            path.display()
        )));
    }
    Ok(RowMatrix::from_rows(&rows))
}

#[derive(Debug)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Compare estimates against truths instance-by-instance; when an ensembles
/// directory is given, CRPS uses the final ensembles, otherwise singleton
/// ensembles at the point estimates (CRPS = MAE).
pub fn cmd_evaluate(
    config: &RunConfig,
    estimates_path: &Path,
    truths_path: &Path,
    ensembles_dir: Option<&Path>,
    method: &str,
    out_dir: &Path,
) -> Result<EvaluateOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (est_header, est_rows) = read_instance_csv(estimates_path)?;
    let (_truth_header, truth_rows) = read_instance_csv(truths_path)?;
    let truth_map: BTreeMap<usize, &Vec<f64>> =
        truth_rows.iter().map(|(i, v)| (*i, v)).collect();

    if est_rows.is_empty() {
        return Err(CoreError::invalid("no estimates to evaluate"));
    }
    let k = est_header.len() - 1;
    let mut est_mat = RowMatrix::zeros(est_rows.len(), k);
    let mut truth_mat = RowMatrix::zeros(est_rows.len(), k);
    let mut ensembles: Vec<RowMatrix> = Vec::new();
    for (r, (instance, values)) in est_rows.iter().enumerate() {
        let truth = truth_map.get(instance).ok_or_else(|| {
            CoreError::invalid(format!("instance {instance} missing from the truth set"))
        })?;
        if truth.len() != k {
            return Err(CoreError::invalid("estimate/truth component mismatch"));
        }
        est_mat.row_mut(r).copy_from_slice(values);
        truth_mat.row_mut(r).copy_from_slice(truth);
        if let Some(dir) = ensembles_dir {
            ensembles.push(read_final_ensemble(
                &dir.join(format!("ensemble_{instance:06}.csv")),
            )?);
        }
    }

    let components: Vec<String> = est_header[1..].to_vec();
    let report = evaluate(
        method,
        &components,
        &est_mat,
        &truth_mat,
        if ensembles.is_empty() {
            None
        } else {
            Some(&ensembles)
        },
        config.eps,
    )?;

    let json_path = out_dir.join("eval_report.json");
    let csv_path = out_dir.join("eval_report.csv");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(&csv_path, report.to_csv())?;
    Ok(EvaluateOutput {
        report,
        json_path,
        csv_path,
    })
}
