//! Evaluating a network under a chosen source of normalization statistics.

use super::data::{stream_rng, Dataset, Stream};
use crate::error::Result;
use crate::io::RunConfig;
use crate::net::{error_rate, MlpSpec, Network};
use crate::norm::{BatchCtx, BnMode, Cohorts};
use crate::stats::{precise_bn, Aggregator, Population};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStats {
    /// Batch statistics over consecutive cohorts of this size.
    MiniBatch(usize),
    /// Installed population statistics (per-domain, then PreciseBN, then EMA).
    Population,
    /// The EMA, ignoring any installed population statistics.
    Ema,
    /// Whatever modes the layers are already in.
    AsIs,
}

impl EvalStats {
    pub fn label(&self) -> &'static str {
        match self {
            EvalStats::MiniBatch(_) => "minibatch",
            EvalStats::Population => "population",
            EvalStats::Ema => "ema",
            EvalStats::AsIs => "as_is",
        }
    }
}

/// Top-1 error of `net` on `data`; the network itself is not modified.
pub fn evaluate(net: &Network, data: &Dataset, how: EvalStats) -> Result<f64> {
    let mut probe = net.clone();
    let n = data.len();
    let cohorts = match how {
        EvalStats::MiniBatch(k) => {
            probe.set_bn_mode(BnMode::EvalMiniBatch);
            let k = k.max(1);
            let sizes: Vec<usize> = (0..n).step_by(k).map(|s| k.min(n - s)).collect();
            Cohorts::contiguous(&sizes)
        }
        EvalStats::Population => {
            probe.set_bn_mode(BnMode::EvalPopulation);
            Cohorts::single(n)
        }
        EvalStats::Ema => {
            for bn in probe.bn_layers_mut() {
                bn.set_population(None)?;
                bn.set_domain_population(None)?;
                bn.set_mode(BnMode::EvalPopulation);
            }
            Cohorts::single(n)
        }
        EvalStats::AsIs => Cohorts::single(n),
    };
    let mut ctx = BatchCtx::with_cohorts(cohorts);
    ctx.domains = data.domains.clone();
    let logits = probe.infer(&data.x, &ctx)?;
    Ok(error_rate(&logits, &data.labels))
}

pub fn build_net(cfg: &RunConfig, input: usize, classes: usize, affine_slots: usize) -> Result<Network> {
    let spec = MlpSpec {
        input,
        hidden: cfg.model.hidden.clone(),
        classes,
        batch_norm: true,
        momentum: cfg.model.momentum,
        eps: cfg.model.eps,
        ema_init: cfg.model.ema_init,
        affine_slots,
    };
    Network::mlp(&spec, &mut stream_rng(cfg.seed, Stream::Init))
}

/// The first `n` samples of `data` (already in random order) as a population.
pub fn population_of(data: &Dataset, n: usize) -> Population {
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    let d = data.select(&idx);
    Population { x: d.x, domains: d.domains }
}

/// A copy of `net` with PreciseBN statistics installed.
pub fn with_precise(net: &Network, pop: &Population, batch: usize) -> Result<Network> {
    let stats = precise_bn(net, pop, batch, Aggregator::default())?;
    let mut out = net.clone();
    crate::stats::install_population(&mut out, &stats)?;
    Ok(out)
}
