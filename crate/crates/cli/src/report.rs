//! Attack-row CSV schema and rank averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ttdp_core::attack::AttackReport;
use ttdp_core::trainer::AdapterKind;

use crate::CliError;

pub const ATTACK_COLUMNS: [&str; 11] = [
    "method", "rank", "params", "epsilon", "ppl", "auc", "tpr@10%", "tpr@1%", "tpr@0.1%", "tpr@0.01%", "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub method: AdapterKind,
    pub rank: usize,
    pub params: usize,
    /// Target budget; empty for non-private rows.
    pub epsilon: Option<f64>,
    pub ppl: f64,
    pub auc: f64,
    #[serde(rename = "tpr@10%")]
    pub tpr_10: f64,
    #[serde(rename = "tpr@1%")]
    pub tpr_1: f64,
    #[serde(rename = "tpr@0.1%")]
    pub tpr_01: f64,
    #[serde(rename = "tpr@0.01%")]
    pub tpr_001: f64,
    pub seed: u64,
}

impl AttackRow {
    pub fn new(report: &AttackReport, target_epsilon: Option<f64>) -> Self {
        let tpr = |fpr| report.tpr(fpr).unwrap_or(f64::NAN);
        Self {
            method: report.method,
            rank: report.rank,
            params: report.params,
            epsilon: target_epsilon,
            ppl: report.ppl,
            auc: report.auc,
            tpr_10: tpr(0.1),
            tpr_1: tpr(0.01),
            tpr_01: tpr(0.001),
            tpr_001: tpr(0.0001),
            seed: report.seed,
        }
    }
}

/// Per-(method, ε) means over ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: AdapterKind,
    pub epsilon: Option<f64>,
    pub ranks: usize,
    pub params: f64,
    pub ppl: f64,
    pub auc: f64,
    #[serde(rename = "tpr@10%")]
    pub tpr_10: f64,
    #[serde(rename = "tpr@1%")]
    pub tpr_1: f64,
    #[serde(rename = "tpr@0.1%")]
    pub tpr_01: f64,
    #[serde(rename = "tpr@0.01%")]
    pub tpr_001: f64,
}

pub fn write_rows<W: std::io::Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<AttackRow>, CliError> {
    let schema = |msg: String| CliError::Schema(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| schema(e.to_string()))?;
    let header = r.headers().map_err(|e| schema(e.to_string()))?.clone();
    if !header.iter().eq(ATTACK_COLUMNS) {
        return Err(schema(format!(
            "expected columns {}, found {}",
            ATTACK_COLUMNS.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| schema(format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn summarize(rows: &[AttackRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(AdapterKind, Option<f64>, Vec<&AttackRow>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(m, e, _)| *m == row.method && *e == row.epsilon) {
            Some(g) => g.2.push(row),
            None => groups.push((row.method, row.epsilon, vec![row])),
        }
    }
    groups.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| a.1.unwrap_or(f64::INFINITY).total_cmp(&b.1.unwrap_or(f64::INFINITY)))
    });
    groups
        .into_iter()
        .map(|(method, epsilon, members)| {
            let mean = |f: fn(&AttackRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / members.len() as f64;
            SummaryRow {
                method,
                epsilon,
                ranks: members.len(),
                params: mean(|r| r.params as f64),
                ppl: mean(|r| r.ppl),
                auc: mean(|r| r.auc),
                tpr_10: mean(|r| r.tpr_10),
                tpr_1: mean(|r| r.tpr_1),
                tpr_01: mean(|r| r.tpr_01),
                tpr_001: mean(|r| r.tpr_001),
            }
        })
        .collect()
}
