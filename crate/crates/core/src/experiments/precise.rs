//! EMA against PreciseBN during training, the PreciseBN batch-size sweep and
//! the spread of PreciseBN estimates over disjoint estimation subsets.

use rand::seq::SliceRandom;

use super::data::{stream_rng, EpochSampler, GaussianTask, Stream};
use super::eval::{build_net, evaluate, population_of, with_precise, EvalStats};
use super::{record, run_id};
use crate::error::Result;
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{train, Network};
use crate::stats::{precise_bn, Aggregator, Population};
use crate::tensor::ChannelStats;

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("ema_vs_precise");
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let (train_set, val) = task.splits(cfg.seed);
    let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, 1)?;
    let workers = cfg.options.workers.unwrap_or(1);
    let mut sampler = EpochSampler::new(train_set.clone(), cfg.sgd.batch_size, workers, stream_rng(cfg.seed, Stream::Sgd))?;
    let pop = population_of(&train_set, cfg.eval.precise_samples);
    let run = run_id(cfg, "");
    let steps = cfg.sgd.steps;
    let every = cfg.eval.every;

    let mut hook = |net: &Network, step: usize| -> Result<()> {
        if (every > 0 && step.is_multiple_of(every)) || step == steps {
            let ema = evaluate(net, &val, EvalStats::Ema)?;
            let precise = evaluate(&with_precise(net, &pop, cfg.eval.precise_batch)?, &val, EvalStats::Population)?;
            res.push(&run, step as u64, "val", "ema", "error", ema)?;
            res.push(&run, step as u64, "val", "precise", "error", precise)?;
        }
        Ok(())
    };
    train(&mut net, &mut sampler, &cfg.sgd, &cfg.plan, &mut hook)?;
    if let Some(v) = res.last(&run, "val", "ema", "error") {
        res.summary.insert(format!("{run}/val/ema"), v);
    }
    if let Some(v) = res.last(&run, "val", "precise", "error") {
        res.summary.insert(format!("{run}/val/precise"), v);
    }

    // PreciseBN batch-size sweep on the final model over the whole training
    // set; B = N is the oracle every row is compared against.
    let full = population_of(&train_set, train_set.len());
    let oracle = precise_bn(&net, &full, full.len(), Aggregator::default())?;
    let oracle_err = evaluate(&installed(&net, &oracle)?, &val, EvalStats::Population)?;
    record(&mut res, &run, steps, "val", "precise_oracle", "error", oracle_err)?;
    for &b in &cfg.options.precise_batches {
        let est = precise_bn(&net, &full, b, Aggregator::default())?;
        let mode = format!("precise_b{b}");
        let err = evaluate(&installed(&net, &est)?, &val, EvalStats::Population)?;
        record(&mut res, &run, steps, "val", &mode, "error", err)?;
        record(&mut res, &run, steps, "train", &mode, "stats_gap", stats_gap(&est, &oracle))?;
    }

    // Two disjoint random subsets of N samples each; the squared difference
    // of their estimates measures PreciseBN's sampling spread at that N.
    let mut rng = stream_rng(cfg.seed, Stream::Estimate);
    let draws = cfg.options.subset_draws.unwrap_or(1).max(1);
    for &n in &cfg.options.subset_sizes {
        if 2 * n > train_set.len() {
            continue;
        }
        let mut total = 0.0;
        for _ in 0..draws {
            let mut idx: Vec<usize> = (0..train_set.len()).collect();
            idx.shuffle(&mut rng);
            let subset = |ids: &[usize]| {
                let d = train_set.select(ids);
                Population { x: d.x, domains: None }
            };
            let b = cfg.eval.precise_batch.min(n);
            let a = precise_bn(&net, &subset(&idx[..n]), b, Aggregator::default())?;
            let c = precise_bn(&net, &subset(&idx[n..2 * n]), b, Aggregator::default())?;
            total += squared_diff(&a, &c);
        }
        record(&mut res, &run, steps, "train", &format!("precise_n{n}"), "subset_sq_diff", total / draws as f64)?;
    }
    let model = with_precise(&net, &pop, cfg.eval.precise_batch)?;
    Ok((res, model))
}

fn installed(net: &Network, stats: &[ChannelStats]) -> Result<Network> {
    let mut out = net.clone();
    crate::stats::install_population(&mut out, stats)?;
    Ok(out)
}

/// Mean squared difference of means and variances over all channels of all layers.
fn squared_diff(a: &[ChannelStats], b: &[ChannelStats]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.mean.iter().chain(&x.var).zip(y.mean.iter().chain(&y.var)) {
            sum += (p - q).powi(2);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Largest per-layer deviation from the oracle estimate.
fn stats_gap(est: &[ChannelStats], oracle: &[ChannelStats]) -> f64 {
    est.iter().zip(oracle).map(|(e, o)| e.max_abs_diff(o)).fold(0.0, f64::max)
}
