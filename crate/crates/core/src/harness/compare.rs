//! Paired per-metric comparison of two runs over the same seeds.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::harness::run::RunManifest;
use crate::stats::{mean, wilcoxon_signed_rank, TestMethod};

/// Where the second run sits relative to the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Tie,
    Lower,
    Higher,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tie => "tie",
            Direction::Lower => "lower",
            Direction::Higher => "higher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub field: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Mean of the paired differences `b - a`.
    pub mean_diff: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n_pairs: usize,
    pub alpha: f64,
    pub rows: Vec<CompareRow>,
}

impl Comparison {
    pub fn row(&self, field: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.field == field)
    }
}

fn check_paired(a: &RunManifest, b: &RunManifest) -> Result<()> {
    if a.seeds != b.seeds {
        return Err(LabError::Mismatch(format!(
            "`{}` and `{}` were run on different seed lists",
            a.scenario, b.scenario
        )));
    }
    if a.n_chunks != b.n_chunks {
        return Err(LabError::Mismatch(format!(
            "`{}` has {} chunks per rollout, `{}` has {}",
            a.scenario, a.n_chunks, b.scenario, b.n_chunks
        )));
    }
    Ok(())
}

/// Compares the listed fields of `b` against `a`.
pub fn compare_fields(a: &RunManifest, b: &RunManifest, fields: &[String], alpha: f64) -> Result<Comparison> {
    check_paired(a, b)?;
    let rows = fields
        .iter()
        .map(|f| {
            let (xa, xb) = (a.column(f)?, b.column(f)?);
            let test = wilcoxon_signed_rank(&xb, &xa)?;
            let diffs: Vec<f64> = xb.iter().zip(&xa).map(|(q, p)| q - p).collect();
            let mean_diff = mean(&diffs);
            let direction = if test.n_used == 0 || !(test.p_value < alpha) || mean_diff == 0.0 {
                Direction::Tie
            } else if mean_diff < 0.0 {
                Direction::Lower
            } else {
                Direction::Higher
            };
            Ok(CompareRow {
                field: f.clone(),
                mean_a: mean(&xa),
                mean_b: mean(&xb),
                mean_diff,
                p_value: test.p_value,
                method: test.method,
                direction,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison {
        a: a.scenario.clone(),
        b: b.scenario.clone(),
        n_pairs: a.seeds.len(),
        alpha,
        rows,
    })
}

/// Compares every field the two runs share, in `a`'s order.
pub fn compare(a: &RunManifest, b: &RunManifest, alpha: f64) -> Result<Comparison> {
    let fields: Vec<String> = a.fields.iter().filter(|f| b.fields.contains(f)).cloned().collect();
    compare_fields(a, b, &fields, alpha)
}
