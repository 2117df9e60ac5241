//! Combining per-batch moments into population statistics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};
use crate::tensor::ChannelStats;

/// Ordered per-batch moments collected while forwarding a population.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchMomentLog {
    entries: Vec<ChannelStats>,
}

impl BatchMomentLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ChannelStats>) -> Result<Self> {
        let mut log = Self::new();
        for e in entries {
            log.push(e)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, stats: ChannelStats) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.channels() != stats.channels() {
                return Err(BnError::ShapeMismatch(format!(
                    "log holds {} channels, entry has {}",
                    first.channels(),
                    stats.channels()
                )));
            }
        }
        self.entries.push(stats);
        Ok(())
    }

    pub fn entries(&self) -> &[ChannelStats] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Total element count across entries.
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    /// Writes `batch_index,channel,mean,var,count` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| BnError::Io(e.to_string());
        w.write_record(["batch_index", "channel", "mean", "var", "count"]).map_err(err)?;
        for (i, e) in self.entries.iter().enumerate() {
            for c in 0..e.channels() {
                w.write_record([
                    i.to_string(),
                    c.to_string(),
                    e.mean[c].to_string(),
                    e.var[c].to_string(),
                    e.count.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the format produced by [`BatchMomentLog::write_csv`]. Batches
    /// must appear in index order starting at 0, channels in order within a
    /// batch.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            batch_index: usize,
            channel: usize,
            mean: f64,
            var: f64,
            count: usize,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| BnError::MalformedCsv(e.to_string()))?;
        if headers != vec!["batch_index", "channel", "mean", "var", "count"] {
            return Err(BnError::MalformedCsv(format!("unexpected header {headers:?}")));
        }
        let mut entries: Vec<ChannelStats> = Vec::new();
        for (line, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| BnError::MalformedCsv(e.to_string()))?;
            let bad = |msg: String| BnError::MalformedCsv(format!("row {}: {msg}", line + 2));
            if row.batch_index == entries.len() {
                if row.channel != 0 {
                    return Err(bad(format!("batch {} starts at channel {}", row.batch_index, row.channel)));
                }
                entries.push(ChannelStats { mean: vec![], var: vec![], count: row.count });
            } else if row.batch_index + 1 != entries.len() {
                return Err(bad(format!("batch index {} out of order", row.batch_index)));
            }
            let e = entries.last_mut().expect("pushed above");
            if row.channel != e.mean.len() {
                return Err(bad(format!("channel {} out of order", row.channel)));
            }
            if row.count != e.count || row.count == 0 {
                return Err(bad(format!("inconsistent count {}", row.count)));
            }
            if !row.mean.is_finite() || !(row.var >= 0.0) || !row.var.is_finite() {
                return Err(bad("mean must be finite and var finite and >= 0".into()));
            }
            e.mean.push(row.mean);
            e.var.push(row.var);
        }
        Self::from_entries(entries).map_err(|e| BnError::MalformedCsv(e.to_string()))
    }
}

/// Moment matching: `mean = E[mu_i]`, `var = E[mu_i^2 + sigma_i^2] - E[mu_i]^2`,
/// with expectations weighted by each entry's element count. With `bessel`
/// the variance is scaled by `N / (N - 1)` for the total count `N`.
pub fn aggregate_moment_matching(log: &BatchMomentLog, bessel: bool) -> Result<ChannelStats> {
    let mut pooled = ChannelStats::pooled(log.entries())?;
    if bessel {
        let n = pooled.count;
        if n < 2 {
            return Err(BnError::DegenerateBatch(n));
        }
        let f = n as f64 / (n - 1) as f64;
        pooled.var.iter_mut().for_each(|v| *v *= f);
    }
    Ok(pooled)
}

/// Average of per-batch Bessel-corrected variances: `B/(B-1) * E[sigma_i^2]`.
///
/// Batches of unequal size are count-weighted, each with its own correction.
pub fn aggregate_naive(log: &BatchMomentLog) -> Result<ChannelStats> {
    let entries = log.entries();
    if entries.is_empty() {
        return Err(BnError::EmptyLog);
    }
    if let Some(e) = entries.iter().find(|e| e.count < 2) {
        return Err(BnError::DegenerateBatch(e.count));
    }
    let channels = entries[0].channels();
    let total = log.total_count() as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for e in entries {
        let w = e.count as f64 / total;
        let corr = e.count as f64 / (e.count - 1) as f64;
        for c in 0..channels {
            mean[c] += w * e.mean[c];
            var[c] += w * corr * e.var[c];
        }
    }
    Ok(ChannelStats { mean, var, count: log.total_count() })
}

/// Which aggregation a PreciseBN pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MomentMatching { bessel: bool },
    Naive,
}

impl Default for Aggregator {
    fn default() -> Self {
        Aggregator::MomentMatching { bessel: false }
    }
}

impl Aggregator {
    pub fn apply(&self, log: &BatchMomentLog) -> Result<ChannelStats> {
        match *self {
            Aggregator::MomentMatching { bessel } => aggregate_moment_matching(log, bessel),
            Aggregator::Naive => aggregate_naive(log),
        }
    }
}
