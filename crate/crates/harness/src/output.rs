//! Training-log CSV (schema version 1), its post-hoc validator and the
//! across-seed aggregate.

use std::io::{Read, Write};
use std::path::Path;

use pcrpo_core::trainer::{expected_mode, Algorithm, TrainRecord, UpdateMode};

use crate::{HarnessError, Result};

pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn log_header(n_costs: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string(), "v_r".to_string()];
    h.extend((0..n_costs).map(|i| format!("v_c_{i}")));
    h.extend(["mode", "theta_deg", "kl", "h_plus", "h_minus", "step_scale"].map(String::from));
    h
}

/// Floats use the shortest round-trip form so that a re-read log reproduces
/// the logged values bit for bit.
pub fn write_log<W: Write>(out: W, records: &[TrainRecord], n_costs: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(log_header(n_costs))?;
    for r in records {
        let mut row = vec![r.iter.to_string(), r.v_r.to_string()];
        row.extend(r.v_c.iter().map(f64::to_string));
        row.push(r.mode.to_string());
        row.push(r.theta_deg.map(|t| t.to_string()).unwrap_or_default());
        row.extend([r.kl, r.h_plus, r.h_minus, r.step_scale].map(|x| x.to_string()));
        w.write_record(row)?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: "<csv>".into(), source: e })?;
    Ok(())
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize, line: usize) -> Result<T> {
    let raw = row.get(idx).unwrap_or_default();
    raw.parse().map_err(|_| HarnessError::Assertion(format!("row {line}: cannot parse column {idx} value {raw:?}")))
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<TrainRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let n_costs = header.iter().filter(|h| h.starts_with("v_c_")).count();
    if header.iter().collect::<Vec<_>>() != log_header(n_costs) {
        return Err(HarnessError::Assertion(format!("unexpected log header {header:?}")));
    }
    let mut records = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row?;
        let k = 2 + n_costs;
        let mode: UpdateMode =
            row.get(k).unwrap_or_default().parse().map_err(|e| HarnessError::Assertion(format!("row {line}: {e}")))?;
        let theta = match row.get(k + 1).unwrap_or_default() {
            "" => None,
            _ => Some(field(&row, k + 1, line)?),
        };
        records.push(TrainRecord {
            iter: field(&row, 0, line)?,
            v_r: field(&row, 1, line)?,
            v_c: (0..n_costs).map(|i| field(&row, 2 + i, line)).collect::<Result<_>>()?,
            mode,
            theta_deg: theta,
            kl: field(&row, k + 2, line)?,
            h_plus: field(&row, k + 3, line)?,
            h_minus: field(&row, k + 4, line)?,
            step_scale: field(&row, k + 5, line)?,
        });
    }
    Ok(records)
}

/// Every row's mode must be what the decision rule gives for its logged
/// values, and every KL must respect the threshold.
pub fn validate_records(
    records: &[TrainRecord],
    algorithm: Algorithm,
    limits: &[f64],
    warmup_iters: usize,
    kl_threshold: f64,
) -> Result<()> {
    for r in records {
        let expected = expected_mode(algorithm, r, limits, warmup_iters)
            .map_err(|e| HarnessError::Assertion(format!("iter {}: {e}", r.iter)))?;
        if expected != r.mode {
            return Err(HarnessError::Assertion(format!(
                "iter {}: logged mode {} but the decision rule gives {expected}",
                r.iter, r.mode
            )));
        }
        if r.kl > kl_threshold {
            return Err(HarnessError::Assertion(format!("iter {}: KL {} above {kl_threshold}", r.iter, r.kl)));
        }
    }
    for w in records.windows(2) {
        if w[1].h_plus > w[0].h_plus || w[1].h_minus < w[0].h_minus {
            return Err(HarnessError::Assertion(format!("iter {}: slack grew", w[1].iter)));
        }
    }
    Ok(())
}

pub fn validate_log_file(
    path: &Path,
    algorithm: Algorithm,
    limits: &[f64],
    warmup_iters: usize,
    kl_threshold: f64,
) -> Result<Vec<TrainRecord>> {
    let file = std::fs::File::open(path).map_err(|source| HarnessError::ReadFile { path: path.into(), source })?;
    let records = read_log(file)?;
    validate_records(&records, algorithm, limits, warmup_iters, kl_threshold)
        .map_err(|e| HarnessError::Assertion(format!("{}: {e}", path.display())))?;
    Ok(records)
}

/// Sample mean and standard deviation (population form; zero for one sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Iteration-wise mean±std of `v_r` and each `v_c` across seeds.
pub fn write_aggregate<W: Write>(out: W, runs: &[&[TrainRecord]], n_costs: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iter".to_string(), "v_r_mean".into(), "v_r_std".into()];
    for i in 0..n_costs {
        header.push(format!("v_c_{i}_mean"));
        header.push(format!("v_c_{i}_std"));
    }
    w.write_record(&header)?;
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    for t in 0..len {
        let (m, s) = mean_std(&runs.iter().map(|r| r[t].v_r).collect::<Vec<_>>());
        let mut row = vec![t.to_string(), m.to_string(), s.to_string()];
        for i in 0..n_costs {
            let (m, s) = mean_std(&runs.iter().map(|r| r[t].v_c[i]).collect::<Vec<_>>());
            row.push(m.to_string());
            row.push(s.to_string());
        }
        w.write_record(row)?;
    }
    w.flush().map_err(|e| HarnessError::Io { path: "<csv>".into(), source: e })?;
    Ok(())
}
