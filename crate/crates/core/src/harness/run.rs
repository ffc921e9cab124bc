//! Seed replication and per-run manifests.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::harness::compare::{compare_fields, Comparison};
use crate::harness::config::{Plan, Scenario};
use crate::metrics::SUMMARY_FIELDS;
use crate::rng::{mix, replicate_seed};
use crate::sampler::{rollout, RolloutRecord};
use crate::stats::{mean, std_dev};
use crate::ttx::tto_rollout;

/// Bumped whenever manifest or CSV columns change.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub index: usize,
    pub seed: u64,
    pub total_nfe: usize,
    /// Every summary field, keyed by name.
    pub metrics: BTreeMap<String, f64>,
    /// Last reward seen while adapting, for optimization runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_reward: Option<f64>,
}

impl SeedRow {
    pub fn metric(&self, field: &str) -> Result<f64> {
        self.metrics
            .get(field)
            .copied()
            .ok_or_else(|| LabError::Mismatch(format!("row {} lacks field `{field}`", self.index)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub field: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub scenario: String,
    pub scenario_hash: String,
    pub base_seed: u64,
    pub n_chunks: usize,
    pub nfe_per_chunk: usize,
    pub seeds: Vec<u64>,
    pub fields: Vec<String>,
    pub rows: Vec<SeedRow>,
    pub aggregates: Vec<Aggregate>,
    pub nfe_total: u64,
    /// Paired comparison against the named reference run, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Comparison>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn column(&self, field: &str) -> Result<Vec<f64>> {
        self.rows.iter().map(|r| r.metric(field)).collect()
    }

    pub fn aggregate(&self, field: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.field == field)
    }

    /// Aggregates recomputed from the per-seed rows.
    pub fn recompute_aggregates(&self) -> Result<Vec<Aggregate>> {
        self.fields
            .iter()
            .map(|f| {
                let col = self.column(f)?;
                Ok(Aggregate { field: f.clone(), n: col.len(), mean: mean(&col), std: std_dev(&col) })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Stable 64-bit digest of the scenario text.
pub fn scenario_hash(text: &str) -> String {
    let words: Vec<u64> = text
        .as_bytes()
        .chunks(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .chain([text.len() as u64])
        .collect();
    format!("{:016x}", mix(&words))
}

/// The rollout of one replicate, and the adapter's final reward if any.
pub fn run_seed(plan: &Plan, seed: u64) -> Result<(RolloutRecord, Option<f64>)> {
    match &plan.tto {
        None => Ok((rollout(&plan.denoiser, &plan.world, &plan.rollout, seed)?, None)),
        Some((spec, reward)) => {
            let (record, outcome) = tto_rollout(&plan.denoiser, spec, reward, &plan.world, &plan.rollout, seed)?;
            Ok((record, outcome.rewards.last().copied()))
        }
    }
}

fn row(plan: &Plan, index: usize, seed: u64) -> Result<(SeedRow, RolloutRecord)> {
    let (record, final_reward) = run_seed(plan, seed)?;
    let report = plan.suite.report(&record)?;
    let metrics = SUMMARY_FIELDS
        .iter()
        .zip(report.summary())
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok((SeedRow { index, seed, total_nfe: record.total_nfe, metrics, final_reward }, record))
}

/// Runs every replicate; rows come back in seed order whatever the
/// execution order. With `keep_rollouts` the records are returned too.
pub fn run_scenario_with(
    scenario: &Scenario,
    base_seed: u64,
    mode: ExecMode,
    keep_rollouts: bool,
) -> Result<(RunManifest, Vec<RolloutRecord>)> {
    let started = Instant::now();
    let plan = scenario.plan()?;
    let seeds: Vec<u64> = (0..scenario.n_seeds).map(|i| replicate_seed(base_seed, i as u64)).collect();
    let results = map_indexed(seeds.len(), mode, |i| {
        row(&plan, i, seeds[i]).map_err(|e| LabError::Run {
            scenario: scenario.name.clone(),
            index: i,
            source: Box::new(e),
        })
    });
    let mut rows = Vec::with_capacity(seeds.len());
    let mut records = Vec::new();
    for r in results {
        let (row, record) = r?;
        rows.push(row);
        if keep_rollouts {
            records.push(record);
        }
    }
    let nfe_total = rows.iter().map(|r| r.total_nfe as u64).sum();
    let mut manifest = RunManifest {
        version: FORMAT_VERSION,
        scenario: scenario.name.clone(),
        scenario_hash: scenario_hash(&scenario.to_toml()?),
        base_seed,
        n_chunks: scenario.n_chunks,
        nfe_per_chunk: plan.rollout.strategy.nfe_per_chunk(&plan.rollout.schedule),
        seeds,
        fields: plan.fields.clone(),
        rows,
        aggregates: Vec::new(),
        nfe_total,
        baseline: None,
        wall_time_s: 0.0,
    };
    manifest.aggregates = manifest.recompute_aggregates()?;
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    Ok((manifest, records))
}

pub fn run_scenario(scenario: &Scenario, base_seed: u64) -> Result<RunManifest> {
    Ok(run_scenario_with(scenario, base_seed, ExecMode::default(), false)?.0)
}

/// Runs `scenario` and `baseline` on the same seeds and attaches the paired
/// comparison (baseline first) to the scenario's manifest.
pub fn run_paired(scenario: &Scenario, baseline: &Scenario, base_seed: u64) -> Result<(RunManifest, RunManifest)> {
    let reference = run_scenario(baseline, base_seed)?;
    let mut manifest = run_scenario(scenario, base_seed)?;
    manifest.baseline = Some(compare_fields(&reference, &manifest, &manifest.fields, scenario.report.alpha)?);
    Ok((manifest, reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    fn small(extra: &str) -> Scenario {
        parse_config(&format!("n_chunks = 4\nn_seeds = 3\n{extra}")).unwrap()
    }

    fn strip_time(mut m: RunManifest) -> RunManifest {
        m.wall_time_s = 0.0;
        m
    }

    #[test]
    fn rerun_is_identical() {
        let s = parse_config("n_chunks = 4\nn_seeds = 1\n").unwrap();
        let a = strip_time(run_scenario(&s, 42).unwrap());
        let b = strip_time(run_scenario(&s, 42).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn modes_agree() {
        let s = small("[drift]\ngain = 1.02\n");
        let (a, _) = run_scenario_with(&s, 5, ExecMode::Parallel, false).unwrap();
        let (b, _) = run_scenario_with(&s, 5, ExecMode::Sequential, false).unwrap();
        assert_eq!(strip_time(a), strip_time(b));
    }

    #[test]
    fn rows_and_aggregates_agree() {
        let m = run_scenario(&small(""), 1).unwrap();
        assert_eq!(m.rows.len(), 3);
        assert_eq!(m.seeds.len(), 3);
        assert_eq!(m.recompute_aggregates().unwrap(), m.aggregates);
        assert!(m.rows.iter().all(|r| r.total_nfe == 16));
        assert_eq!(m.nfe_total, 48);
    }

    #[test]
    fn manifest_json_round_trips() {
        let m = run_scenario(&small(""), 9).unwrap();
        assert_eq!(RunManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn hash_tracks_content() {
        assert_eq!(scenario_hash("a = 1"), scenario_hash("a = 1"));
        assert_ne!(scenario_hash("a = 1"), scenario_hash("a = 2"));
        assert_ne!(scenario_hash(""), scenario_hash("\0"));
    }
}
