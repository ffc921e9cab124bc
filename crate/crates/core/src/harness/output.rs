//! On-disk reports: a JSON manifest, JSON-lines rows and CSV summaries.
//!
//! CSV files start with a `version` column holding [`FORMAT_VERSION`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::harness::compare::Comparison;
use crate::harness::run::{RunManifest, FORMAT_VERSION};
use crate::harness::sweep::SweepPoint;
use crate::metrics::SUMMARY_FIELDS;
use crate::sampler::RolloutRecord;

pub const SEEDS_CSV_HEADER: [&str; 5] = ["version", "scenario", "index", "seed", "total_nfe"];
pub const SUMMARY_CSV_HEADER: [&str; 11] = [
    "version",
    "scenario",
    "field",
    "n",
    "mean",
    "std",
    "baseline",
    "baseline_mean",
    "mean_diff",
    "p_value",
    "direction",
];
pub const COMPARE_CSV_HEADER: [&str; 10] =
    ["version", "a", "b", "field", "mean_a", "mean_b", "mean_diff", "p_value", "method", "direction"];

fn csv_err(e: csv::Error) -> LabError {
    LabError::Io(std::io::Error::other(e))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Files written for one run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub manifest: PathBuf,
    pub rows: PathBuf,
    pub seeds_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub rollouts: Option<PathBuf>,
}

pub fn write_run(dir: &Path, manifest: &RunManifest, records: &[RolloutRecord]) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles {
        manifest: dir.join("manifest.json"),
        rows: dir.join("rows.jsonl"),
        seeds_csv: dir.join("seeds.csv"),
        summary_csv: dir.join("summary.csv"),
        rollouts: (!records.is_empty()).then(|| dir.join("rollouts.jsonl")),
    };
    fs::write(&files.manifest, manifest.to_json()? + "\n")?;

    let mut rows = BufWriter::new(File::create(&files.rows)?);
    for r in &manifest.rows {
        serde_json::to_writer(&mut rows, r)?;
        rows.write_all(b"\n")?;
    }
    rows.flush()?;

    let mut w = writer(&files.seeds_csv)?;
    w.write_record(SEEDS_CSV_HEADER.iter().chain(SUMMARY_FIELDS.iter())).map_err(csv_err)?;
    for r in &manifest.rows {
        let mut rec = vec![
            FORMAT_VERSION.to_string(),
            manifest.scenario.clone(),
            r.index.to_string(),
            r.seed.to_string(),
            r.total_nfe.to_string(),
        ];
        for f in SUMMARY_FIELDS {
            rec.push(num(r.metric(f)?));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = writer(&files.summary_csv)?;
    w.write_record(SUMMARY_CSV_HEADER).map_err(csv_err)?;
    for a in &manifest.aggregates {
        let cmp = manifest.baseline.as_ref().and_then(|c| c.row(&a.field).map(|r| (c, r)));
        let (base, base_mean, diff, p, dir) = match cmp {
            Some((c, r)) => (
                c.a.clone(),
                num(r.mean_a),
                num(r.mean_diff),
                num(r.p_value),
                r.direction.as_str().to_string(),
            ),
            None => Default::default(),
        };
        w.write_record([
            FORMAT_VERSION.to_string(),
            manifest.scenario.clone(),
            a.field.clone(),
            a.n.to_string(),
            num(a.mean),
            num(a.std),
            base,
            base_mean,
            diff,
            p,
            dir,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    if let Some(path) = &files.rollouts {
        let mut out = BufWriter::new(File::create(path)?);
        for rec in records {
            rec.write_jsonl(&mut out)?;
        }
        out.flush()?;
    }
    Ok(files)
}

pub fn write_comparison(path: &Path, c: &Comparison) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = writer(path)?;
    w.write_record(COMPARE_CSV_HEADER).map_err(csv_err)?;
    for r in &c.rows {
        w.write_record([
            FORMAT_VERSION.to_string(),
            c.a.clone(),
            c.b.clone(),
            r.field.clone(),
            num(r.mean_a),
            num(r.mean_b),
            num(r.mean_diff),
            num(r.p_value),
            format!("{:?}", r.method).to_lowercase(),
            r.direction.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid point with the mean of every summary field.
pub fn write_sweep(path: &Path, points: &[SweepPoint], manifests: &[RunManifest]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["version".to_string(), "point".into(), "assignments".into(), "nfe_per_chunk".into()];
    header.extend(SUMMARY_FIELDS.iter().map(|f| format!("{f}_mean")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, (p, m)) in points.iter().zip(manifests).enumerate() {
        let mut rec = vec![FORMAT_VERSION.to_string(), i.to_string(), p.label(), m.nfe_per_chunk.to_string()];
        for f in SUMMARY_FIELDS {
            let col = m.column(f)?;
            rec.push(num(crate::stats::mean(&col)));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes each scenario as `<name>.toml` under `dir`.
pub fn write_scenarios(dir: &Path, scenarios: &[crate::harness::config::Scenario]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    scenarios
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.toml", s.name));
            fs::write(&path, s.to_toml()?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecMode;
    use crate::harness::config::parse_config;
    use crate::harness::run::run_scenario_with;

    #[test]
    fn run_files_have_fixed_columns() {
        let s = parse_config("n_chunks = 4\nn_seeds = 2\n").unwrap();
        let (m, recs) = run_scenario_with(&s, 4, ExecMode::Sequential, true).unwrap();
        let dir = std::env::temp_dir().join(format!("ttc-lab-output-{}", std::process::id()));
        let files = write_run(&dir, &m, &recs).unwrap();
        let seeds = fs::read_to_string(&files.seeds_csv).unwrap();
        let mut lines = seeds.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&header[..5], SEEDS_CSV_HEADER);
        assert_eq!(&header[5..], SUMMARY_FIELDS);
        assert_eq!(lines.count(), 2);
        let rows = fs::read_to_string(&files.rows).unwrap();
        assert_eq!(rows.lines().count(), 2);
        let back = RunManifest::from_json(&fs::read_to_string(&files.manifest).unwrap()).unwrap();
        assert_eq!(back, m);
        let rollouts = fs::read_to_string(files.rollouts.unwrap()).unwrap();
        assert_eq!(rollouts.lines().count(), 2 * 4);
        fs::remove_dir_all(&dir).unwrap();
    }
}
