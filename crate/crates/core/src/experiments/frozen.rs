//! Freezing BN partway through training and fine-tuning the rest.

use super::data::{stream_rng, EpochSampler, GaussianTask, Stream};
use super::eval::{build_net, evaluate, population_of, with_precise, EvalStats};
use super::{record, run_id};
use crate::error::Result;
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{train, Network, SgdConfig};
use crate::norm::BnMode;

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("frozen_finetune");
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let (train_set, val) = task.splits(cfg.seed);
    let pop = population_of(&train_set, cfg.eval.precise_samples);
    let workers = cfg.options.workers.unwrap_or(1);
    let steps = cfg.sgd.steps;
    let f = cfg.options.freeze_fraction.unwrap_or(1.0);
    let freeze_at = ((f * steps as f64).round() as usize).min(steps);
    let mb = match cfg.plan.strategy {
        crate::batching::Strategy::Ghost { sub_batch } => sub_batch,
        _ => cfg.sgd.batch_size / workers,
    };

    // control: the whole schedule with BN on batch statistics
    let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, 1)?;
    let mut sampler = EpochSampler::new(train_set.clone(), cfg.sgd.batch_size, workers, stream_rng(cfg.seed, Stream::Sgd))?;
    let mut checkpoint: Option<Network> = (freeze_at == 0).then(|| net.clone());
    train(&mut net, &mut sampler, &cfg.sgd, &cfg.plan, &mut |n, step| {
        if step == freeze_at {
            checkpoint = Some(n.clone());
        }
        Ok(())
    })?;
    let control = run_id(cfg, "control");
    let control_pop = with_precise(&net, &pop, cfg.eval.precise_batch)?;
    record(&mut res, &control, steps, "val", "population", "error", evaluate(&control_pop, &val, EvalStats::Population)?)?;
    record(&mut res, &control, steps, "val", "minibatch", "error", evaluate(&net, &val, EvalStats::MiniBatch(mb))?)?;

    // frozen: PreciseBN statistics of the checkpoint become constants
    let ckpt = checkpoint.expect("freeze step lies within the schedule");
    let mut frozen = with_precise(&ckpt, &pop, cfg.eval.precise_batch)?;
    for bn in frozen.bn_layers_mut() {
        bn.freeze();
    }
    let run = run_id(cfg, "frozen");
    record(&mut res, &run, freeze_at, "val", "frozen", "error", evaluate(&frozen, &val, EvalStats::AsIs)?)?;
    let remaining = steps - freeze_at;
    if remaining > 0 {
        let ft = SgdConfig { steps: remaining, warmup_steps: cfg.options.finetune_warmup.unwrap_or(0), ..cfg.sgd.clone() };
        let mut sampler = EpochSampler::new(train_set, cfg.sgd.batch_size, workers, stream_rng(cfg.seed, Stream::Extra))?;
        train(&mut frozen, &mut sampler, &ft, &cfg.plan, &mut |_, _| Ok(()))?;
        debug_assert!(frozen.bn_layers().all(|b| b.mode() == BnMode::Frozen));
        record(&mut res, &run, steps, "val", "frozen", "error", evaluate(&frozen, &val, EvalStats::AsIs)?)?;
    }
    Ok((res, frozen))
}
