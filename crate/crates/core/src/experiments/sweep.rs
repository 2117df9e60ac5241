//! Normalization batch size sweep at a fixed SGD batch size.

use super::data::{stream_rng, EpochSampler, GaussianTask, Stream};
use super::eval::{build_net, evaluate, population_of, with_precise, EvalStats};
use super::{record, run_id};
use crate::batching::{NormBatchPlan, Strategy};
use crate::error::Result;
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{train, Network};

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("nbs_sweep");
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let (train_set, val) = task.splits(cfg.seed);
    let pop = population_of(&train_set, cfg.eval.precise_samples);
    // training error is measured on a train subset as large as the val set
    let train_eval = train_set.select(&(0..val.len().min(train_set.len())).collect::<Vec<_>>());
    let workers = cfg.options.workers.unwrap_or(1);
    let sizes = if cfg.options.nbs.is_empty() {
        match cfg.plan.strategy {
            Strategy::Ghost { sub_batch } => vec![sub_batch],
            _ => vec![cfg.sgd.batch_size / workers],
        }
    } else {
        cfg.options.nbs.clone()
    };
    let mut last = None;
    for nbs in sizes {
        // every row starts from the same initialization and sees the same batches
        let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, 1)?;
        let mut sampler = EpochSampler::new(train_set.clone(), cfg.sgd.batch_size, workers, stream_rng(cfg.seed, Stream::Sgd))?;
        let plan = NormBatchPlan { strategy: Strategy::Ghost { sub_batch: nbs }, domain_policy: cfg.plan.domain_policy };
        train(&mut net, &mut sampler, &cfg.sgd, &plan, &mut |_, _| Ok(()))?;
        let run = run_id(cfg, &format!("nbs{nbs}"));
        let t = cfg.sgd.steps;
        record(&mut res, &run, t, "train", "minibatch", "error", evaluate(&net, &train_eval, EvalStats::MiniBatch(nbs))?)?;
        record(&mut res, &run, t, "val", "minibatch", "error", evaluate(&net, &val, EvalStats::MiniBatch(nbs))?)?;
        let precise = with_precise(&net, &pop, cfg.eval.precise_batch)?;
        record(&mut res, &run, t, "val", "population", "error", evaluate(&precise, &val, EvalStats::Population)?)?;
        last = Some(precise);
    }
    let model = last.ok_or_else(|| crate::error::BnError::ConfigParse("options.nbs is empty".into()))?;
    Ok((res, model))
}
