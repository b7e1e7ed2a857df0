use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::{bail, Result};

/// One test accuracy: a subject's trials in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: Scenario,
    pub backbone: String,
    /// Ablation variant, `baseline` for weights 1/0/0, or `csp`.
    pub variant: String,
    pub subject_id: u16,
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: u16,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// Mean over folds per subject, by ascending subject id.
    pub per_subject: Vec<SubjectScore>,
    /// Mean over subjects per fold, by ascending fold.
    pub per_fold: Vec<FoldScore>,
    pub mean: f64,
    /// Population standard deviation across subjects.
    pub std: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn aggregate(rows: Vec<ResultRow>) -> Result<ResultTable> {
    if rows.is_empty() {
        bail!(Contract, "cannot aggregate an empty result set");
    }
    let mut by_subject: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    let mut by_fold: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_subject.entry(r.subject_id).or_default().push(r.accuracy);
        by_fold.entry(r.fold).or_default().push(r.accuracy);
    }
    let per_subject: Vec<SubjectScore> = by_subject
        .iter()
        .map(|(&subject_id, v)| SubjectScore {
            subject_id,
            accuracy: mean(v),
        })
        .collect();
    let per_fold = by_fold
        .iter()
        .map(|(&fold, v)| FoldScore {
            fold,
            accuracy: mean(v),
        })
        .collect();
    let accs: Vec<f64> = per_subject.iter().map(|s| s.accuracy).collect();
    let m = mean(&accs);
    let var = accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / accs.len() as f64;
    Ok(ResultTable {
        rows,
        per_subject,
        per_fold,
        mean: m,
        std: var.sqrt(),
    })
}

pub fn write_rows_csv<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

pub fn write_table_json<W: Write>(w: W, table: &ResultTable) -> Result<()> {
    serde_json::to_writer_pretty(w, table)?;
    Ok(())
}
