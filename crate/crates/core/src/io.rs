//! Run configuration, checkpoints and atomic file output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batching::{DomainPolicy, NormBatchPlan};
use crate::error::{BnError, Result};
use crate::experiments::{Corruption, DomainShift, GroupKey, TaskConfig};
use crate::net::{Layer, Network, SgdConfig};
use crate::norm::BnMode;
use crate::stats::EmaInit;
use crate::tensor::ChannelStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub ema_init: EmaInit,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eps() -> f64 {
    crate::norm::DEFAULT_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSchedule {
    /// Evaluate every this many steps (0: only at the end).
    #[serde(default)]
    pub every: usize,
    /// PreciseBN mini-batch size.
    pub precise_batch: usize,
    /// PreciseBN population size, drawn from the training set.
    pub precise_samples: usize,
}

/// Knobs that only some scenarios read; unused ones are ignored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioOptions {
    /// Normalization batch sizes to sweep.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub nbs: Vec<usize>,
    /// PreciseBN batch sizes to sweep.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub precise_batches: Vec<usize>,
    /// Estimation-subset sizes for the PreciseBN spread study.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub subset_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_draws: Option<usize>,
    /// Fraction of training after which BN is frozen.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub freeze_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_warmup: Option<usize>,
    /// Target domains for the adaptation study.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<Corruption>,
    /// Domains of the shared-head study.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub domains: Vec<DomainShift>,
    /// Give each domain of the shared-head study its own classes
    /// (`c % domains == d`) instead of all of them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_classes: Option<bool>,
    /// Policy rows of the shared-head study.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<DomainPolicy>,
    /// Correlated copies per group in crafted batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_copies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_key: Option<GroupKey>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the scenario named on the command line when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub plan: NormBatchPlan,
    pub eval: EvalSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub options: ScenarioOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| BnError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| BnError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Schema checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |e: BnError| BnError::ConfigParse(e.to_string());
        self.task.validate().map_err(bad)?;
        self.sgd.validate().map_err(bad)?;
        self.plan.validate().map_err(bad)?;
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(BnError::ConfigParse("model.hidden must list positive widths".into()));
        }
        if !(0.0..=1.0).contains(&self.model.momentum) || !(self.model.eps >= 0.0) {
            return Err(BnError::ConfigParse("model.momentum must lie in [0, 1] and eps be >= 0".into()));
        }
        if self.eval.precise_batch == 0 || self.eval.precise_samples == 0 {
            return Err(BnError::ConfigParse("eval.precise_batch and eval.precise_samples must be positive".into()));
        }
        if let Some(f) = self.options.freeze_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(BnError::ConfigParse("options.freeze_fraction must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().ok_or_else(|| BnError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsSourceTag {
    Ema,
    Precise,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsEntry {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
    pub source: StatsSourceTag,
}

pub type StatsCheckpoint = BTreeMap<String, StatsEntry>;

/// The statistics each BN layer would use at inference, keyed `bn{k}`
/// (per-domain estimates as `bn{k}.d{d}`).
pub fn stats_checkpoint(net: &Network) -> StatsCheckpoint {
    let mut out = BTreeMap::new();
    for (k, bn) in net.bn_layers().enumerate() {
        let entry = |s: &ChannelStats, source| StatsEntry { mean: s.mean.clone(), var: s.var.clone(), count: s.count, source };
        if bn.mode() == BnMode::Frozen {
            if let Some(f) = bn.frozen() {
                out.insert(format!("bn{k}"), entry(f, StatsSourceTag::Frozen));
                continue;
            }
        }
        if let Some(all) = bn.domain_population() {
            for (d, s) in all.iter().enumerate() {
                out.insert(format!("bn{k}.d{d}"), entry(s, StatsSourceTag::Precise));
            }
        } else if let Some(p) = bn.population() {
            out.insert(format!("bn{k}"), entry(p, StatsSourceTag::Precise));
        } else {
            out.insert(format!("bn{k}"), entry(&bn.ema.as_stats(), StatsSourceTag::Ema));
        }
    }
    out
}

/// Installs a checkpoint written by [`stats_checkpoint`] for shared statistics.
pub fn load_stats_checkpoint(net: &mut Network, ckpt: &StatsCheckpoint) -> Result<()> {
    for (k, bn) in net.bn_layers_mut().enumerate() {
        let e = ckpt.get(&format!("bn{k}")).ok_or_else(|| BnError::MissingStats(format!("bn{k}")))?;
        let s = ChannelStats::new(e.mean.clone(), e.var.clone(), e.count)?;
        match e.source {
            StatsSourceTag::Frozen => {
                bn.set_frozen(Some(s))?;
                bn.set_mode(BnMode::Frozen);
            }
            StatsSourceTag::Precise => bn.set_population(Some(s))?,
            StatsSourceTag::Ema => {
                bn.ema.mean = s.mean;
                bn.ema.var = s.var;
            }
        }
    }
    Ok(())
}

pub type ParamsCheckpoint = BTreeMap<String, Vec<f64>>;

pub fn params_checkpoint(net: &Network) -> ParamsCheckpoint {
    net.named_params().into_iter().collect()
}

pub fn load_params_checkpoint(net: &mut Network, ckpt: &ParamsCheckpoint) -> Result<()> {
    let mut flat = Vec::with_capacity(net.param_count());
    for (name, arr) in net.named_params() {
        let v = ckpt.get(&name).ok_or_else(|| BnError::MissingStats(name.clone()))?;
        if v.len() != arr.len() {
            return Err(BnError::SizeMismatch(format!("{name}: expected {} values, got {}", arr.len(), v.len())));
        }
        flat.extend_from_slice(v);
    }
    net.set_params(&flat)
}

/// Layer types in order, for the summary.
pub fn describe(net: &Network) -> Vec<&'static str> {
    net.layers().iter().map(Layer::kind).collect()
}
