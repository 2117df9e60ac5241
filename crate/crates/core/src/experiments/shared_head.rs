//! One network applied to several input domains under each combination of
//! shared / per-domain SGD statistics, population statistics and affine.

use super::data::{stream_rng, Dataset, DomainSampler, GaussianTask, Stream};
use super::eval::{build_net, evaluate, EvalStats};
use super::{record, run_id};
use crate::batching::{DomainPolicy, NormBatchPlan, StatsScope};
use crate::error::{BnError, Result};
use crate::io::RunConfig;
use crate::metrics::ScenarioResult;
use crate::net::{train, Network};
use crate::stats::{install_domain_population, install_population, precise_bn, Aggregator, Population};

pub(super) fn run(cfg: &RunConfig) -> Result<(ScenarioResult, Network)> {
    let mut res = ScenarioResult::new("shared_head");
    let shifts = &cfg.options.domains;
    if shifts.is_empty() {
        return Err(BnError::ConfigParse("shared_head needs options.domains".into()));
    }
    let d = shifts.len();
    if !cfg.sgd.batch_size.is_multiple_of(d) {
        return Err(BnError::ConfigParse(format!("batch size {} is not divisible by {d} domains", cfg.sgd.batch_size)));
    }
    let task = GaussianTask::new(&cfg.task, cfg.seed)?;
    let partition = cfg.options.partition_classes.unwrap_or(false);
    if partition && cfg.task.classes < d {
        return Err(BnError::ConfigParse("partitioning needs at least one class per domain".into()));
    }
    let per_domain = |stream: Stream, n: usize| -> Vec<Dataset> {
        let mut rng = stream_rng(cfg.seed, stream);
        shifts
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let classes: Vec<usize> = (0..cfg.task.classes).filter(|c| !partition || c % d == k).collect();
                let mut ds = task.sample_classes(&mut rng, n, &classes).with_domain(k);
                ds.x = s.apply(&ds.x);
                ds
            })
            .collect()
    };
    let train_sets = per_domain(Stream::Train, cfg.task.train / d);
    let val = Dataset::concat(&per_domain(Stream::Val, cfg.task.val / d))?;
    let pops: Vec<Population> = train_sets
        .iter()
        .map(|t| {
            let n = (cfg.eval.precise_samples / d).min(t.len());
            let s = t.select(&(0..n).collect::<Vec<_>>());
            Population { x: s.x, domains: s.domains }
        })
        .collect();
    let mixed = interleave(&pops)?;

    let policies = if cfg.options.policies.is_empty() { vec![cfg.plan.domain_policy] } else { cfg.options.policies.clone() };
    let mut last = None;
    for policy in policies {
        let slots = if policy.affine == StatsScope::PerDomain { d } else { 1 };
        let mut net = build_net(cfg, cfg.task.dim, cfg.task.classes, slots)?;
        let mut sampler = DomainSampler::new(train_sets.clone(), cfg.sgd.batch_size / d, &mut stream_rng(cfg.seed, Stream::Sgd))?;
        let plan = NormBatchPlan { strategy: cfg.plan.strategy, domain_policy: policy };
        train(&mut net, &mut sampler, &cfg.sgd, &plan, &mut |_, _| Ok(()))?;
        install_stats(&mut net, &policy, &pops, &mixed, cfg.eval.precise_batch)?;
        let err = evaluate(&net, &val, EvalStats::Population)?;
        record(&mut res, &run_id(cfg, &policy.label()), cfg.sgd.steps, "val", "population", "error", err)?;
        last = Some(net);
    }
    Ok((res, last.expect("at least one policy row")))
}

/// Population statistics as the policy prescribes: one set over a
/// domain-mixed population, or one set per domain from that domain alone.
fn install_stats(net: &mut Network, policy: &DomainPolicy, pops: &[Population], mixed: &Population, b: usize) -> Result<()> {
    match policy.pop_stats {
        StatsScope::Shared => {
            // mixed batches normalize jointly unless SGD split them by domain
            let stats = if policy.sgd_stats == StatsScope::Shared {
                precise_bn(net, mixed, b, Aggregator::default())?
            } else {
                precise_bn_split(net, mixed, b)?
            };
            install_population(net, &stats)
        }
        StatsScope::PerDomain => {
            let per: Vec<_> = pops
                .iter()
                .map(|p| precise_bn(net, p, b, Aggregator::default()))
                .collect::<Result<_>>()?;
            install_domain_population(net, &per)
        }
    }
}

/// Shared population statistics of a network trained with per-domain batch
/// statistics: each domain's mini-batch is normalized on its own, and the
/// per-batch moments are pooled across domains.
fn precise_bn_split(net: &Network, mixed: &Population, b: usize) -> Result<Vec<crate::tensor::ChannelStats>> {
    use crate::batching::split_cohorts_by_domain;
    use crate::norm::{BatchCtx, BnMode, Cohorts};
    let domains = mixed.domains.as_ref().ok_or(BnError::MissingDomainId)?;
    let mut probe = net.clone();
    for bn in probe.bn_layers_mut() {
        bn.set_mode(BnMode::TrainMiniBatch);
        bn.set_collect(true);
        bn.take_moment_log();
    }
    let n = mixed.x.n();
    for start in (0..n).step_by(b.max(1)) {
        let idx: Vec<usize> = (start..(start + b).min(n)).collect();
        let ids: Vec<usize> = idx.iter().map(|&i| domains[i]).collect();
        let cohorts = split_cohorts_by_domain(&Cohorts::single(idx.len()), &ids)?;
        let ctx = BatchCtx::with_cohorts(cohorts).domains(ids);
        probe.infer(&mixed.x.select(&idx), &ctx)?;
    }
    probe.bn_layers_mut().map(|bn| Aggregator::default().apply(&bn.take_moment_log())).collect()
}

/// Round-robin over the domains, so every mini-batch mixes them evenly.
fn interleave(pops: &[Population]) -> Result<Population> {
    let longest = pops.iter().map(Population::len).max().unwrap_or(0);
    let mut parts = Vec::new();
    let mut ids = Vec::new();
    for i in 0..longest {
        for p in pops {
            if i < p.len() {
                parts.push(p.x.select(&[i]));
                ids.push(p.domains.as_ref().map_or(0, |d| d[i]));
            }
        }
    }
    Population::new(crate::tensor::concat_batch(&parts)?).with_domains(ids)
}
