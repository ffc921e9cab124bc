//! Grid sweeps over dotted scenario keys.

use crate::error::{LabError, Result};
use crate::harness::config::Scenario;

/// One grid point: the assignments made and the resulting scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub assignments: Vec<(String, toml::Value)>,
    pub scenario: Scenario,
}

impl SweepPoint {
    /// `key=value` pairs joined by commas, for names and logs.
    pub fn label(&self) -> String {
        self.assignments
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let bad = |msg: &str| LabError::Semantic { key: format!("sweep.{key}"), message: msg.into() };
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| bad("empty key"))?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| bad("path runs through a non-table value"))?;
    }
    if matches!(cur.get(*last), Some(toml::Value::Table(_))) {
        return Err(bad("cannot replace a whole section"));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Cartesian product of the `[sweep]` lists, keys in sorted order with the
/// last key varying fastest. Each point is validated.
pub fn expand(base: &Scenario) -> Result<Vec<SweepPoint>> {
    let keys: Vec<(&String, &Vec<toml::Value>)> = base.sweep.iter().collect();
    if let Some((k, _)) = keys.iter().find(|(_, v)| v.is_empty()) {
        return Err(LabError::Semantic { key: format!("sweep.{k}"), message: "needs at least one value".into() });
    }
    let mut stripped = base.clone();
    stripped.sweep.clear();
    let table = toml::Table::try_from(&stripped)
        .map_err(|e| LabError::Config(format!("cannot serialize scenario: {e}")))?;
    let total: usize = keys.iter().map(|(_, v)| v.len()).product();
    let mut points = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut picks = vec![0; keys.len()];
        for (i, (_, vals)) in keys.iter().enumerate().rev() {
            picks[i] = rem % vals.len();
            rem /= vals.len();
        }
        let mut t = table.clone();
        let mut assignments = Vec::with_capacity(keys.len());
        for (i, (k, vals)) in keys.iter().enumerate() {
            let v = vals[picks[i]].clone();
            set_path(&mut t, k, v.clone())?;
            assignments.push((k.to_string(), v));
        }
        let mut scenario: Scenario = t.try_into().map_err(|e: toml::de::Error| LabError::Semantic {
            key: "sweep".into(),
            message: e.message().trim().to_string(),
        })?;
        let point = SweepPoint { assignments, scenario: scenario.clone() };
        scenario.name = format!("{}[{}]", base.name, point.label());
        scenario.plan().map_err(|e| LabError::Semantic { key: format!("sweep[{}]", point.label()), message: e.to_string() })?;
        points.push(SweepPoint { scenario, ..point });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::parse_config;

    #[test]
    fn grid_is_cartesian() {
        let s = parse_config("[sweep]\n\"drift.gain\" = [1.0, 1.02, 1.05]\nn_chunks = [3, 4]\n").unwrap();
        let pts = expand(&s).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].scenario.drift.gain, 1.0);
        assert_eq!(pts[0].scenario.n_chunks, 3);
        assert_eq!(pts[1].scenario.n_chunks, 4);
        assert_eq!(pts[5].scenario.drift.gain, 1.05);
        assert!(pts.iter().all(|p| p.scenario.sweep.is_empty()));
        assert_eq!(pts[1].label(), "drift.gain=1.0,n_chunks=4");
    }

    #[test]
    fn no_sweep_is_one_point() {
        let s = parse_config("").unwrap();
        assert_eq!(expand(&s).unwrap().len(), 1);
    }

    #[test]
    fn bad_points_are_reported() {
        let s = parse_config("[sweep]\n\"correction.levels\" = [[0.6]]\n\"correction.mode\" = [\"path-wise\"]\n").unwrap();
        assert!(matches!(expand(&s), Err(LabError::Semantic { .. })));
        let s = parse_config("[sweep]\n\"drift.colour\" = [1]\n").unwrap();
        assert!(matches!(expand(&s), Err(LabError::Semantic { .. })));
        let s = parse_config("[sweep]\ndrift = [1]\n").unwrap();
        assert!(matches!(expand(&s), Err(LabError::Semantic { .. })));
    }
}
