//! Append-only JSON-lines metrics stream, one record per training iteration.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub wall_time_s: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub episodes: usize,
    pub mean_raw_reward: f64,
    pub mean_transformed_reward: f64,
    pub past_replace_rate: f64,
    pub aborted: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval: Vec<EvalReport>,
    pub config_hash: String,
}

impl MetricsRecord {
    /// Flat numeric view used by plotting and early stopping.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "policy_loss" => Some(self.policy_loss),
            "value_loss" => Some(self.value_loss),
            "entropy" => Some(self.entropy),
            "clip_fraction" => Some(self.clip_fraction),
            "approx_kl" => Some(self.approx_kl),
            "grad_norm" => Some(self.grad_norm),
            "mean_raw_reward" => Some(self.mean_raw_reward),
            "mean_transformed_reward" => Some(self.mean_transformed_reward),
            "past_replace_rate" => Some(self.past_replace_rate),
            _ => self.eval.iter().find_map(|e| match name {
                "selfplay_defects" => e.selfplay_defects,
                "defects_vs_alldefect" => e.defects_vs_alldefect,
                "defects_vs_allcooperate" => e.defects_vs_allcooperate,
                "reciprocity_margin" => e.reciprocity_margin,
                "holdout_defect_vs_alldefect" => e.holdout_defect_vs_alldefect,
                "holdout_defect_vs_allcooperate" => e.holdout_defect_vs_allcooperate,
                "rapport_differential" => e.rapport_differential,
                "team_mean_reward" => e.team_mean_reward,
                "team_agents_on_team" => e.team_agents_on_team,
                "team_mean_length" => e.team_mean_length,
                _ => None,
            }),
        }
    }
}

pub fn append_record(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record)
        .map_err(|e| Error::config(format!("metrics serialization: {e}")))?;
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("bad metrics line: {e}")))?;
        out.push(rec);
    }
    Ok(out)
}

/// Drops records at or past `iteration` (used when resuming mid-run so the
/// stream stays strictly increasing).
pub fn truncate_from(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let records = read_records(path)?;
    let keep: Vec<&MetricsRecord> =
        records.iter().filter(|r| r.iteration < iteration).collect();
    let mut file = File::create(path)?;
    for r in keep {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::config(format!("metrics serialization: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        for i in 0..5 {
            let rec = MetricsRecord {
                iteration: i,
                entropy: 0.5 + i as f64,
                config_hash: "abc".into(),
                ..Default::default()
            };
            append_record(&path, &rec).unwrap();
        }
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[3].iteration, 3);
        assert_eq!(records[3].entropy, 3.5);
    }

    #[test]
    fn truncation_preserves_strictly_earlier_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        for i in 0..10 {
            append_record(
                &path,
                &MetricsRecord { iteration: i, ..Default::default() },
            )
            .unwrap();
        }
        truncate_from(&path, 4).unwrap();
        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.iteration < 4));
    }
}
