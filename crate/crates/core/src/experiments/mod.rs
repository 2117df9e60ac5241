//! Desk-scale scenario runners.
//!
//! Each scenario trains small BN networks on a synthetic task and logs
//! error rates under different sources of normalization statistics. Every
//! random draw comes from a stream derived from `RunConfig::seed`, so a
//! scenario is a pure function of its config.

mod data;
mod domain;
mod eval;
mod frozen;
mod leakage;
mod precise;
mod shared_head;
mod sweep;

pub use data::{
    stream_rng, Corruption, Dataset, DomainSampler, DomainShift, EpochSampler, GaussianTask, GroupKey, GroupedBatchSampler,
    Stream, TaskConfig,
};
pub use eval::{build_net, evaluate, population_of, with_precise, EvalStats};

use crate::batching::{DomainPolicy, NormBatchPlan, StatsScope, Strategy};
use crate::error::{BnError, Result};
use crate::io::{EvalSchedule, ModelConfig, RunConfig, ScenarioOptions};
use crate::metrics::ScenarioResult;
use crate::net::{Network, SgdConfig};
use crate::stats::EmaInit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    EmaVsPrecise,
    NbsSweep,
    FrozenFinetune,
    DomainAdapt,
    SharedHead,
    Leakage,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::EmaVsPrecise,
        Scenario::NbsSweep,
        Scenario::FrozenFinetune,
        Scenario::DomainAdapt,
        Scenario::SharedHead,
        Scenario::Leakage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::EmaVsPrecise => "ema_vs_precise",
            Scenario::NbsSweep => "nbs_sweep",
            Scenario::FrozenFinetune => "frozen_finetune",
            Scenario::DomainAdapt => "domain_adapt",
            Scenario::SharedHead => "shared_head",
            Scenario::Leakage => "leakage",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Scenario::name).join(", ")
    }
}

impl std::str::FromStr for Scenario {
    type Err = BnError;

    fn from_str(name: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| BnError::UnknownScenario { name: name.to_string(), valid: Scenario::valid_names() })
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn base_config(scenario: Scenario) -> RunConfig {
    RunConfig {
        scenario: Some(scenario.name().to_string()),
        seed: 0,
        task: TaskConfig::default(),
        model: ModelConfig { hidden: vec![64, 64], momentum: 0.9, eps: crate::norm::DEFAULT_EPS, ema_init: EmaInit::Standard },
        sgd: SgdConfig { lr: 0.05, momentum: 0.9, steps: 600, batch_size: 32, warmup_steps: 0, seed: 0 },
        plan: NormBatchPlan::new(Strategy::PerWorker),
        eval: EvalSchedule { every: 0, precise_batch: 256, precise_samples: 2048 },
        output_dir: None,
        options: ScenarioOptions::default(),
    }
}

/// The configuration each scenario is tuned for (also shipped under `configs/`).
pub fn default_config(scenario: Scenario) -> RunConfig {
    let mut c = base_config(scenario);
    let o = &mut c.options;
    match scenario {
        Scenario::EmaVsPrecise => {
            c.model.momentum = 0.999;
            c.sgd.steps = 300;
            c.eval.every = 50;
            o.precise_batches = vec![2, 8, 32, 256, 4096];
            o.subset_sizes = vec![32, 256, 2048];
            o.subset_draws = Some(4);
        }
        Scenario::NbsSweep => {
            c.plan = NormBatchPlan::new(Strategy::Ghost { sub_batch: 2 });
            o.nbs = vec![2, 8, 32];
        }
        Scenario::FrozenFinetune => {
            c.plan = NormBatchPlan::new(Strategy::Ghost { sub_batch: 2 });
            o.freeze_fraction = Some(0.8);
            o.finetune_warmup = Some(20);
        }
        Scenario::DomainAdapt => {
            o.corruptions = vec![
                Corruption::NONE,
                Corruption { a: 0.5, b: 1.0, noise: 0.3 },
                Corruption { a: 0.2, b: 3.0, noise: 0.3 },
            ];
        }
        Scenario::SharedHead => {
            c.sgd.batch_size = 48;
            o.domains = vec![
                DomainShift { mean: 0.0, scale: 1.0 },
                DomainShift { mean: 4.0, scale: 0.5 },
                DomainShift { mean: -4.0, scale: 2.0 },
            ];
            o.partition_classes = Some(true);
            use StatsScope::{PerDomain as D, Shared as S};
            o.policies = vec![
                DomainPolicy::new(S, S, S),
                DomainPolicy::new(S, D, S),
                DomainPolicy::new(D, S, S),
                DomainPolicy::new(D, D, S),
                DomainPolicy::new(D, S, D),
                DomainPolicy::new(D, D, D),
            ];
        }
        Scenario::Leakage => {
            // the shared latent dominates the class signal, so only a model
            // that reads it off its cohort partner can classify well
            c.task = TaskConfig { classes: 4, dim: 16, separation: 1.5, cluster_scale: 8.0, val: 4096, ..TaskConfig::default() };
            c.sgd = SgdConfig { lr: 0.02, momentum: 0.5, steps: 2000, ..c.sgd };
            o.group_copies = Some(2);
            o.group_key = Some(GroupKey::Cluster);
            o.workers = Some(16);
        }
    }
    c
}

/// Runs one scenario for `cfg.seed`.
pub fn run_scenario(scenario: Scenario, cfg: &RunConfig) -> Result<ScenarioResult> {
    run_scenario_with_model(scenario, cfg).map(|(r, _)| r)
}

/// Like [`run_scenario`], also returning the scenario's main model with the
/// statistics it was evaluated with (used for checkpoints).
pub fn run_scenario_with_model(scenario: Scenario, cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    cfg.validate()?;
    if let Some(name) = &cfg.scenario {
        if name != scenario.name() {
            return Err(BnError::ConfigParse(format!(
                "config is for scenario `{name}`, not `{}`",
                scenario.name()
            )));
        }
    }
    match scenario {
        Scenario::EmaVsPrecise => precise::run(cfg),
        Scenario::NbsSweep => sweep::run(cfg),
        Scenario::FrozenFinetune => frozen::run(cfg),
        Scenario::DomainAdapt => domain::run(cfg),
        Scenario::SharedHead => shared_head::run(cfg),
        Scenario::Leakage => leakage::run(cfg),
    }
}

/// Worker threads for multi-seed runs: `BNLAB_THREADS` if set, else the
/// number of logical cores.
pub fn thread_budget() -> usize {
    std::env::var("BNLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `scenario` once per seed, in parallel up to [`thread_budget`];
/// results come back in seed order.
pub fn run_seeds(scenario: Scenario, cfg: &RunConfig, seeds: &[u64]) -> Vec<Result<ScenarioResult>> {
    let threads = thread_budget().max(1);
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(threads) {
        let batch: Vec<Result<ScenarioResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let mut c = cfg.clone();
                    c.seed = seed;
                    s.spawn(move || run_scenario(scenario, &c))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
        });
        out.extend(batch);
    }
    out
}

pub(crate) fn run_id(cfg: &RunConfig, label: &str) -> String {
    if label.is_empty() {
        format!("seed{}", cfg.seed)
    } else {
        format!("seed{}/{label}", cfg.seed)
    }
}

/// Pushes a final metric and records it in the summary as `{run}/{split}/{mode}`.
pub(crate) fn record(res: &mut ScenarioResult, run: &str, step: usize, split: &str, mode: &str, metric: &str, v: f64) -> Result<()> {
    res.push(run, step as u64, split, mode, metric, v)?;
    let key = if metric == "error" {
        format!("{run}/{split}/{mode}")
    } else {
        format!("{run}/{split}/{mode}/{metric}")
    };
    res.summary.insert(key, v);
    Ok(())
}
