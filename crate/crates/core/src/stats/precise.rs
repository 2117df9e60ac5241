//! Re-estimating population statistics of a fixed network.

use super::aggregate::{Aggregator, BatchMomentLog};
use crate::error::{BnError, Result};
use crate::net::Network;
use crate::norm::{BatchCtx, BnMode};
use crate::tensor::{channel_moments, ChannelStats, Tensor4};

/// Inputs to estimate statistics over, with optional per-sample domain ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub x: Tensor4,
    pub domains: Option<Vec<usize>>,
}

impl Population {
    pub fn new(x: Tensor4) -> Self {
        Population { x, domains: None }
    }

    pub fn with_domains(mut self, domains: Vec<usize>) -> Result<Self> {
        if domains.len() != self.x.n() {
            return Err(BnError::SizeMismatch("one domain id per population sample required".into()));
        }
        self.domains = Some(domains);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.x.n()
    }

    pub fn is_empty(&self) -> bool {
        self.x.n() == 0
    }

    /// Consecutive mini-batches of `b` samples; the last may be smaller.
    fn batches(&self, b: usize) -> Result<Vec<(Tensor4, BatchCtx)>> {
        if self.is_empty() {
            return Err(BnError::EmptyPopulation);
        }
        if b == 0 {
            return Err(BnError::InvalidParams("batch size must be positive".into()));
        }
        let n = self.len();
        Ok((0..n)
            .step_by(b)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + b).min(n)).collect();
                let mut ctx = BatchCtx::single(idx.len());
                if let Some(d) = &self.domains {
                    ctx = ctx.domains(idx.iter().map(|&i| d[i]).collect());
                }
                (self.x.select(&idx), ctx)
            })
            .collect())
    }
}

/// PreciseBN: forwards the population in mini-batches of `batch_size` with
/// every BN layer on batch statistics and aggregates each layer's moments.
/// Works on a copy, so `net` (parameters, EMA, modes) is untouched.
pub fn precise_bn(net: &Network, population: &Population, batch_size: usize, aggregator: Aggregator) -> Result<Vec<ChannelStats>> {
    let batches = population.batches(batch_size)?;
    let mut probe = net.clone();
    for bn in probe.bn_layers_mut() {
        bn.set_mode(BnMode::TrainMiniBatch);
        bn.set_collect(true);
        bn.take_moment_log();
    }
    for (x, ctx) in &batches {
        probe.infer(x, ctx)?;
    }
    probe.bn_layers_mut().map(|bn| aggregator.apply(&bn.take_moment_log())).collect()
}

/// Layer-by-layer estimation: layer `j`'s statistics are gathered with every
/// earlier layer already normalizing by its estimated population statistics,
/// so the result does not depend on `batch_size`.
pub fn precise_bn_layerwise(
    net: &Network,
    population: &Population,
    batch_size: usize,
    aggregator: Aggregator,
) -> Result<Vec<ChannelStats>> {
    let batches = population.batches(batch_size)?;
    let mut probe = net.clone();
    for bn in probe.bn_layers_mut() {
        bn.set_domain_population(None)?;
    }
    let mut out: Vec<ChannelStats> = Vec::new();
    for j in 0..probe.bn_count() {
        let mut log = BatchMomentLog::new();
        for (x, ctx) in &batches {
            let h = probe.forward_to_bn(x, ctx, j)?;
            log.push(channel_moments(&h)?)?;
        }
        let stats = aggregator.apply(&log)?;
        let bn = probe.bn_layers_mut().nth(j).expect("counted above");
        bn.set_population(Some(stats.clone()))?;
        bn.set_mode(BnMode::EvalPopulation);
        out.push(stats);
    }
    Ok(out)
}

/// Stores one estimate per BN layer as its population statistics.
pub fn install_population(net: &mut Network, stats: &[ChannelStats]) -> Result<()> {
    if stats.len() != net.bn_count() {
        return Err(BnError::SizeMismatch(format!("{} estimates for {} BN layers", stats.len(), net.bn_count())));
    }
    for (bn, s) in net.bn_layers_mut().zip(stats) {
        bn.set_population(Some(s.clone()))?;
    }
    Ok(())
}

/// Stores per-domain estimates: `per_domain[d][layer]`.
pub fn install_domain_population(net: &mut Network, per_domain: &[Vec<ChannelStats>]) -> Result<()> {
    let layers = net.bn_count();
    if per_domain.is_empty() || per_domain.iter().any(|d| d.len() != layers) {
        return Err(BnError::SizeMismatch("every domain needs one estimate per BN layer".into()));
    }
    for (j, bn) in net.bn_layers_mut().enumerate() {
        bn.set_domain_population(Some(per_domain.iter().map(|d| d[j].clone()).collect()))?;
    }
    Ok(())
}
