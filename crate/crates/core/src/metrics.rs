use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{BnError, Result};

pub const METRICS_HEADER: [&str; 7] = ["run_id", "scenario", "step", "split", "stats_mode", "metric", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub scenario: String,
    pub step: u64,
    pub split: String,
    pub stats_mode: String,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric stream plus a summary of final values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioResult {
    pub scenario: String,
    rows: Vec<MetricRow>,
    last_step: BTreeMap<String, u64>,
    /// Final metrics keyed by configuration row.
    pub summary: BTreeMap<String, f64>,
}

impl ScenarioResult {
    pub fn new(scenario: &str) -> Self {
        ScenarioResult { scenario: scenario.to_string(), ..Default::default() }
    }

    /// Appends a row; steps must not decrease within a run.
    pub fn push(&mut self, run_id: &str, step: u64, split: &str, stats_mode: &str, metric: &str, value: f64) -> Result<()> {
        if let Some(&prev) = self.last_step.get(run_id) {
            if step < prev {
                return Err(BnError::InvalidParams(format!("run {run_id}: step {step} after {prev}")));
            }
        }
        self.last_step.insert(run_id.to_string(), step);
        self.rows.push(MetricRow {
            run_id: run_id.to_string(),
            scenario: self.scenario.clone(),
            step,
            split: split.to_string(),
            stats_mode: stats_mode.to_string(),
            metric: metric.to_string(),
            value,
        });
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Moves another result's rows and summary in after this one's.
    pub fn extend(&mut self, other: ScenarioResult) -> Result<()> {
        for r in other.rows {
            self.push(&r.run_id, r.step, &r.split, &r.stats_mode, &r.metric, r.value)?;
        }
        self.summary.extend(other.summary);
        Ok(())
    }

    /// Value of the last row matching every given field.
    pub fn last(&self, run_id: &str, split: &str, stats_mode: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.run_id == run_id && r.split == split && r.stats_mode == stats_mode && r.metric == metric)
            .map(|r| r.value)
    }

    /// CSV with the fixed header; floats in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| BnError::Io(e.to_string());
        w.write_record(METRICS_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.run_id.as_str(),
                r.scenario.as_str(),
                &r.step.to_string(),
                r.split.as_str(),
                r.stats_mode.as_str(),
                r.metric.as_str(),
                &r.value.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "scenario": self.scenario,
            "rows": self.rows.len(),
            "final": self.summary,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_are_monotone_per_run() {
        let mut r = ScenarioResult::new("demo");
        r.push("a", 5, "val", "ema", "error", 0.5).unwrap();
        r.push("b", 1, "val", "ema", "error", 0.5).unwrap();
        assert!(r.push("a", 4, "val", "ema", "error", 0.5).is_err());
        r.push("a", 5, "val", "precise", "error", 0.25).unwrap();
        assert_eq!(r.last("a", "val", "precise", "error"), Some(0.25));
    }

    #[test]
    fn csv_layout() {
        let mut r = ScenarioResult::new("demo");
        r.push("s1", 10, "val", "ema", "error", 0.1 + 0.2).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "run_id,scenario,step,split,stats_mode,metric,value\ns1,demo,10,val,ema,error,0.30000000000000004\n"
        );
    }
}
