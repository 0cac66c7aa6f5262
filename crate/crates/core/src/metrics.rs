//! Spearman rank correlation with average ranks for ties, and the
//! plasticity / stability measures built on it.
//!
//! Undefined correlations (a constant input) surface as
//! [`MetricError::Undefined`]; callers report them as missing rather than
//! substituting zero.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: constant input")]
    Undefined,
    #[error("missing prediction record for evaluator e_{t} on system d_{i}")]
    MissingRecord { i: usize, t: usize },
    #[error("stability needs t >= 2, got {0}")]
    StepTooSmall(usize),
}

/// Average (fractional) ranks, 1-based.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of the average-ranked inputs.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooShort(xs.len()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Predictions of evaluator `e_t` on the test split of system `d_i`
/// (both indices are 1-based positions in the sequence).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub step: usize,
    pub system: usize,
    pub system_id: String,
    /// Internal scores in (0, 1), aligned with the test split order.
    pub scores: Vec<f64>,
    /// The same scores on the 0–2 grade scale.
    pub scaled_scores: Vec<f64>,
    /// Human grades in {0, 1, 2}.
    pub labels: Vec<u8>,
}

impl PredictionRecord {
    pub fn new(
        step: usize,
        system: usize,
        system_id: impl Into<String>,
        scores: Vec<f64>,
        labels: Vec<u8>,
    ) -> Self {
        let scaled_scores = scores.iter().map(|s| 2.0 * s).collect();
        Self {
            step,
            system,
            system_id: system_id.into(),
            scores,
            scaled_scores,
            labels,
        }
    }

    pub fn label_values(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(l)).collect()
    }
}

/// `Pla^t`: correlation of `e_t`'s scores on `d_t` with human labels.
pub fn plasticity(record: &PredictionRecord) -> Result<f64, MetricError> {
    spearman(&record.scores, &record.label_values())
}

fn find(
    records: &[PredictionRecord],
    step: usize,
    system: usize,
) -> Result<&PredictionRecord, MetricError> {
    records
        .iter()
        .find(|r| r.step == step && r.system == system)
        .ok_or(MetricError::MissingRecord { i: system, t: step })
}

/// Per-system agreement `sp(e_i, e_t, d_i)` for `i < t`, `None` where undefined.
pub fn stability_terms(
    records: &[PredictionRecord],
    t: usize,
) -> Result<Vec<Option<f64>>, MetricError> {
    if t < 2 {
        return Err(MetricError::StepTooSmall(t));
    }
    (1..t)
        .map(|i| {
            let then = find(records, i, i)?;
            let now = find(records, t, i)?;
            match spearman(&then.scores, &now.scores) {
                Ok(v) => Ok(Some(v)),
                Err(MetricError::Undefined) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `Sta^t`: mean agreement of `e_t` with each earlier `e_i` on `d_i`.
/// Undefined terms are excluded from the mean; if all are undefined the
/// result is undefined.
pub fn stability(records: &[PredictionRecord], t: usize) -> Result<f64, MetricError> {
    let defined: Vec<f64> = stability_terms(records, t)?.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(MetricError::Undefined);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Maps an undefined correlation to `None`, passing other errors through.
pub fn defined(result: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::Undefined) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn append_records(path: &Path, records: &[PredictionRecord]) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => bad.push(format!("{}:{}: {e}", path.display(), n + 1)),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(Error::Ingestion(bad))
    }
}
