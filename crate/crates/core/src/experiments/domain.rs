//! Source-trained model evaluated on corrupted target domains, with source
//! population statistics and with statistics recomputed on the target.

use super::data::{stream_rng, EpochSampler, GaussianTask, Stream};
use super::eval::{build_net, evaluate, population_of, with_precise, EvalStats};
use super::{record, run_id};
use crate::error::Result;
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{train, Network};
use crate::stats::Population;

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("domain_adapt");
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let (train_set, val) = task.splits(cfg.seed);
    let workers = cfg.options.workers.unwrap_or(1);
    let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, 1)?;
    let mut sampler = EpochSampler::new(train_set.clone(), cfg.sgd.batch_size, workers, stream_rng(cfg.seed, Stream::Sgd))?;
    train(&mut net, &mut sampler, &cfg.sgd, &cfg.plan, &mut |_, _| Ok(()))?;
    let b = cfg.eval.precise_batch;
    let source = with_precise(&net, &population_of(&train_set, cfg.eval.precise_samples), b)?;
    let steps = cfg.sgd.steps;
    record(&mut res, &run_id(cfg, "source"), steps, "val", "source", "error", evaluate(&source, &val, EvalStats::Population)?)?;

    let mut rng = stream_rng(cfg.seed, Stream::Extra);
    for (i, c) in cfg.options.corruptions.iter().enumerate() {
        // held-out target samples for re-estimation, disjoint from target val
        let held_out = task.sample(&mut rng, cfg.eval.precise_samples);
        let target_pop = Population::new(c.apply(&held_out.x, &mut rng));
        let mut target_val = val.clone();
        target_val.x = c.apply(&val.x, &mut rng);
        let run = run_id(cfg, &format!("c{i}"));
        record(&mut res, &run, steps, "target", "source", "error", evaluate(&source, &target_val, EvalStats::Population)?)?;
        let adapted = with_precise(&net, &target_pop, b)?;
        record(&mut res, &run, steps, "target", "target", "error", evaluate(&adapted, &target_val, EvalStats::Population)?)?;
        // observational: statistics of the very inputs being evaluated
        let own = with_precise(&net, &Population::new(target_val.x.clone()), b)?;
        record(&mut res, &run, steps, "target", "target_val_inputs", "error", evaluate(&own, &target_val, EvalStats::Population)?)?;
    }
    Ok((res, source))
}
