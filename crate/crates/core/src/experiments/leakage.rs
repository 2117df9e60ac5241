//! Training on hand-crafted batches whose normalization cohorts share a
//! latent, and the batch constructions that remove the leak.

use super::data::{stream_rng, Dataset, GaussianTask, GroupKey, GroupedBatchSampler, Stream};
use super::eval::{build_net, evaluate, with_precise, EvalStats};
use super::{record, run_id};
use crate::batching::{plan_cohorts, NormBatchPlan, Strategy};
use crate::error::{BnError, Result};
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{error_rate, train, BatchSource, Network, TrainBatch};
use crate::norm::BnMode;
use crate::stats::Population;

/// Reorders grouped batches copy-major into one worker, so consecutive
/// sub-batches of `groups` samples hold one member of every group.
struct CopyMajor(GroupedBatchSampler);

impl BatchSource for CopyMajor {
    fn next_batch(&mut self, step: usize) -> Result<TrainBatch> {
        let b = self.0.next_batch(step)?;
        let (g, m) = (self.0.groups, self.0.copies);
        let idx: Vec<usize> = (0..m).flat_map(|k| (0..g).map(move |j| j * m + k)).collect();
        Ok(TrainBatch {
            x: b.x.select(&idx),
            labels: idx.iter().map(|&i| b.labels[i]).collect(),
            worker_sizes: vec![g * m],
            domains: None,
            reference: None,
        })
    }
}

struct Variant {
    label: &'static str,
    copies: usize,
    strategy: Strategy,
    copy_major: bool,
}

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("leakage");
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let m = cfg.options.group_copies.unwrap_or(2);
    let key = cfg.options.group_key.unwrap_or(GroupKey::Cluster);
    let workers = cfg.options.workers.unwrap_or(1);
    let batch = cfg.sgd.batch_size;
    if m == 0 || !batch.is_multiple_of(m) || !(batch / m).is_multiple_of(workers) || !batch.is_multiple_of(workers) {
        return Err(BnError::ConfigParse(format!(
            "batch {batch} must split into groups of {m} spread evenly over {workers} workers"
        )));
    }
    let groups = batch / m;

    // evaluation data: same-pattern batches, independent samples (each with
    // its own latent) for random batches, and a population for PreciseBN
    let mut rng = stream_rng(cfg.seed, Stream::Val);
    let n_batches = (cfg.task.val / batch).max(1);
    let independent = task.sample_grouped(&mut rng, n_batches * batch, 1, key)?;
    let pop = {
        let d: Dataset = task.sample_grouped(&mut stream_rng(cfg.seed, Stream::Estimate), cfg.eval.precise_samples, 1, key)?;
        Population::new(d.x)
    };

    let variants = [
        Variant { label: "crafted", copies: m, strategy: cfg.plan.strategy, copy_major: false },
        Variant { label: "control", copies: 1, strategy: cfg.plan.strategy, copy_major: false },
        Variant { label: "shuffle", copies: m, strategy: Strategy::Shuffle { seed: cfg.seed }, copy_major: false },
        Variant { label: "sync", copies: m, strategy: Strategy::Sync, copy_major: false },
        Variant { label: "ghost_across", copies: m, strategy: Strategy::Ghost { sub_batch: groups }, copy_major: true },
    ];
    let mut crafted = None;
    for v in variants {
        let sampler = |stream| GroupedBatchSampler::new(task.clone(), batch / v.copies, v.copies, key, workers, stream_rng(cfg.seed, stream));
        let mut source: Box<dyn BatchSource> =
            if v.copy_major { Box::new(CopyMajor(sampler(Stream::Sgd)?)) } else { Box::new(sampler(Stream::Sgd)?) };
        let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, 1)?;
        let plan = NormBatchPlan { strategy: v.strategy, domain_policy: cfg.plan.domain_policy };
        train(&mut net, source.as_mut(), &cfg.sgd, &plan, &mut |_, _| Ok(()))?;

        // validation batches built exactly like the training batches
        let mut val_source: Box<dyn BatchSource> =
            if v.copy_major { Box::new(CopyMajor(sampler(Stream::Val)?)) } else { Box::new(sampler(Stream::Val)?) };
        let same: Vec<TrainBatch> = (0..n_batches).map(|i| val_source.next_batch(i)).collect::<Result<_>>()?;
        let layout = same[0].worker_sizes.clone();
        let random: Vec<TrainBatch> = (0..n_batches)
            .map(|i| {
                let d = independent.select(&(i * batch..(i + 1) * batch).collect::<Vec<_>>());
                TrainBatch { x: d.x, labels: d.labels, worker_sizes: layout.clone(), domains: None, reference: None }
            })
            .collect();

        let run = run_id(cfg, v.label);
        let t = cfg.sgd.steps;
        record(&mut res, &run, t, "val_same_pattern", "minibatch", "error", batch_error(&net, &same, &plan)?)?;
        record(&mut res, &run, t, "val_random", "minibatch", "error", batch_error(&net, &random, &plan)?)?;
        let precise = with_precise(&net, &pop, cfg.eval.precise_batch)?;
        record(&mut res, &run, t, "val_random", "population", "error", evaluate(&precise, &independent, EvalStats::Population)?)?;
        crafted.get_or_insert(precise);
    }
    Ok((res, crafted.expect("variants are not empty")))
}

/// Error with batch statistics, each batch normalized with the cohorts the
/// plan gives it.
fn batch_error(net: &Network, batches: &[TrainBatch], plan: &NormBatchPlan) -> Result<f64> {
    let mut probe = net.clone();
    probe.set_bn_mode(BnMode::EvalMiniBatch);
    let (mut wrong, mut total) = (0.0, 0usize);
    for (i, b) in batches.iter().enumerate() {
        let ctx = plan_cohorts(&b.worker_sizes, plan.strategy, i as u64)?.ctx();
        let logits = probe.infer(&b.x, &ctx)?;
        wrong += error_rate(&logits, &b.labels) * b.labels.len() as f64;
        total += b.labels.len();
    }
    Ok(wrong / total.max(1) as f64)
}
