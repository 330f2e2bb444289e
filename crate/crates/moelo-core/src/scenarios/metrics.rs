//! Localization error, per-unit forgetting, and the evaluation log emitted
//! as metrics.csv.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub fn localization_error(pred: [f64; 3], truth: [f64; 3]) -> f64 {
    ((pred[0] - truth[0]).powi(2) + (pred[1] - truth[1]).powi(2) + (pred[2] - truth[2]).powi(2))
        .sqrt()
}

/// One evaluation cell: how a learning unit (device or region) scored after
/// a given step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub mode: String,
    pub unit_type: String,
    pub unit_id: usize,
    pub le_mean_m: f64,
    pub le_worst_m: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn new() -> Self {
        MetricLog::default()
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn final_step(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.step).max()
    }

    /// Per-unit mean LE ordered by step.
    pub fn unit_histories(&self) -> BTreeMap<usize, Vec<f64>> {
        let mut map: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.unit_id).or_default().push((r.step, r.le_mean_m));
        }
        map.into_iter()
            .map(|(unit, mut h)| {
                h.sort_by_key(|(s, _)| *s);
                (unit, h.into_iter().map(|(_, le)| le).collect())
            })
            .collect()
    }

    /// Unweighted mean over unit scores at the final step.
    pub fn final_mean_le(&self) -> Option<f64> {
        let last = self.final_step()?;
        let scores: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step == last)
            .map(|r| r.le_mean_m)
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }

    pub fn le_for(&self, step: usize, unit_id: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.step == step && r.unit_id == unit_id)
            .map(|r| r.le_mean_m)
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,mode,unit_type,unit_id,le_mean_m,le_worst_m,n_test")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.mode, r.unit_type, r.unit_id, r.le_mean_m, r.le_worst_m, r.n_test
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-unit forgetting (last minus best mean LE) and the average across all
/// units. Units evaluated once have last = best, contributing zero.
pub fn forgetting_metrics(log: &MetricLog) -> Result<(Vec<(usize, f64)>, f64)> {
    if log.rows.is_empty() {
        return Err(Error::Data("metric log holds no evaluations".into()));
    }
    let mut per_unit = Vec::new();
    for (unit, history) in log.unit_histories() {
        let best = history.iter().copied().fold(f64::INFINITY, f64::min);
        let last = *history.last().expect("history is non-empty");
        per_unit.push((unit, last - best));
    }
    let af = per_unit.iter().map(|(_, f)| f).sum::<f64>() / per_unit.len() as f64;
    Ok((per_unit, af))
}

/// Mean forgetting over units that were already present before the final
/// step: how much the veterans lost by the end.
pub fn old_unit_mean_forgetting(log: &MetricLog) -> Result<f64> {
    let last = log.final_step().ok_or_else(|| {
        Error::Data("metric log holds no evaluations".into())
    })?;
    let mut first_seen: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &log.rows {
        let e = first_seen.entry(r.unit_id).or_insert(r.step);
        *e = (*e).min(r.step);
    }
    let (per_unit, _) = forgetting_metrics(log)?;
    let old: Vec<f64> = per_unit
        .iter()
        .filter(|(unit, _)| first_seen[unit] < last)
        .map(|(_, f)| *f)
        .collect();
    if old.is_empty() {
        return Err(Error::Data("no unit predates the final step".into()));
    }
    Ok(old.iter().sum::<f64>() / old.len() as f64)
}
