use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use crate::batching::{plan_cohorts, split_cohorts_by_domain, NormBatchPlan, StatsScope};
use crate::error::{BnError, Result};
use crate::norm::BatchCtx;
use crate::tensor::{concat_batch, Tensor4};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Linear ramp from `lr / warmup_steps` to `lr`.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is the "parameters never move" control
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(BnError::InvalidParams(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(BnError::InvalidParams(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(BnError::InvalidParams("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Heavy-ball SGD over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd { cfg, velocity: Vec::new() })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn apply(&mut self, net: &mut Network, grads: &Gradients, step: usize) -> Result<()> {
        let g = grads.flat();
        let mut p = net.params();
        if g.len() != p.len() {
            return Err(BnError::SizeMismatch("gradient does not match parameters".into()));
        }
        if self.velocity.len() != p.len() {
            self.velocity = vec![0.0; p.len()];
        }
        let lr = self.cfg.lr_at(step);
        for ((w, v), gi) in p.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = self.cfg.momentum * *v + gi;
            *w -= lr * *v;
        }
        net.set_params(&p)
    }
}

/// One SGD batch, already laid out across simulated workers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x: Tensor4,
    pub labels: Vec<usize>,
    /// Samples per worker, in order; sums to `x.n()`.
    pub worker_sizes: Vec<usize>,
    pub domains: Option<Vec<usize>>,
    /// Pool of reference samples for virtual normalization.
    pub reference: Option<Tensor4>,
}

impl TrainBatch {
    pub fn single_worker(x: Tensor4, labels: Vec<usize>) -> Self {
        let n = x.n();
        TrainBatch { x, labels, worker_sizes: vec![n], domains: None, reference: None }
    }
}

pub trait BatchSource {
    fn next_batch(&mut self, step: usize) -> Result<TrainBatch>;
}

/// The network input, labels and normalization context for one step.
pub fn step_inputs(batch: &TrainBatch, plan: &NormBatchPlan, step: usize) -> Result<(Tensor4, Vec<usize>, BatchCtx)> {
    if batch.worker_sizes.iter().sum::<usize>() != batch.x.n() || batch.labels.len() != batch.x.n() {
        return Err(BnError::SizeMismatch("worker sizes and labels must cover the batch".into()));
    }
    let cp = plan_cohorts(&batch.worker_sizes, plan.strategy, step as u64)?;
    let mut x = batch.x.clone();
    let mut labels = batch.labels.clone();
    let mut domains = batch.domains.clone();
    let extra = cp.total() - cp.main;
    if extra > 0 {
        let pool = batch
            .reference
            .as_ref()
            .ok_or_else(|| BnError::InvalidPlan("virtual plan needs reference samples".into()))?;
        if pool.n() < cp.reference_per_worker {
            return Err(BnError::InvalidPlan("reference pool is smaller than the plan's extra count".into()));
        }
        let idx: Vec<usize> = (0..cp.reference_per_worker).collect();
        let one = pool.select(&idx);
        let mut parts = vec![x];
        parts.extend(std::iter::repeat_n(one, batch.worker_sizes.len()));
        x = concat_batch(&parts)?;
        labels.resize(cp.total(), 0);
        if let Some(d) = domains.as_mut() {
            d.resize(cp.total(), 0);
        }
    }
    let mut ctx = cp.ctx();
    if plan.domain_policy.sgd_stats == StatsScope::PerDomain {
        let d = domains.as_deref().ok_or(BnError::MissingDomainId)?;
        ctx.cohorts = split_cohorts_by_domain(&ctx.cohorts, d)?;
    }
    ctx.domains = domains;
    Ok((x, labels, ctx))
}

/// One forward/backward/update; returns the loss.
pub fn train_step(net: &mut Network, sgd: &mut Sgd, batch: &TrainBatch, plan: &NormBatchPlan, step: usize) -> Result<f64> {
    let (x, labels, ctx) = step_inputs(batch, plan, step)?;
    let (loss, grads) = net.loss_and_grad(&x, &labels, &ctx)?;
    sgd.apply(net, &grads, step)?;
    Ok(loss)
}

/// Runs `cfg.steps` SGD steps. `hook(net, steps_done)` runs after every step
/// and may evaluate a clone of the network however it likes.
pub fn train(
    net: &mut Network,
    source: &mut dyn BatchSource,
    cfg: &SgdConfig,
    plan: &NormBatchPlan,
    hook: &mut dyn FnMut(&Network, usize) -> Result<()>,
) -> Result<Vec<f64>> {
    plan.validate()?;
    let mut sgd = Sgd::new(cfg.clone())?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = source.next_batch(step)?;
        losses.push(train_step(net, &mut sgd, &batch, plan, step)?);
        hook(net, step + 1)?;
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::Strategy;
    use crate::net::{error_rate, MlpSpec};
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two Gaussian blobs at -/+ 2 along the first axis.
    struct Blobs {
        rng: ChaCha8Rng,
        n: usize,
    }

    impl Blobs {
        fn draw(&mut self, n: usize) -> TrainBatch {
            let labels: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..2)).collect();
            let mut x = Tensor4::randn(Shape4::flat(n, 2), &mut self.rng);
            for (i, &l) in labels.iter().enumerate() {
                x.sample_mut(i)[0] += if l == 1 { 2.0 } else { -2.0 };
            }
            TrainBatch::single_worker(x, labels)
        }
    }

    impl BatchSource for Blobs {
        fn next_batch(&mut self, _step: usize) -> Result<TrainBatch> {
            Ok(self.draw(self.n))
        }
    }

    fn cfg(lr: f64, steps: usize) -> SgdConfig {
        SgdConfig { lr, momentum: 0.9, steps, batch_size: 16, warmup_steps: 10, seed: 0 }
    }

    fn blob_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::mlp(&MlpSpec::new(2, vec![8], 2), &mut rng).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let mut net = blob_net(1);
        let mut src = Blobs { rng: ChaCha8Rng::seed_from_u64(2), n: 16 };
        let plan = NormBatchPlan::new(Strategy::PerWorker);
        train(&mut net, &mut src, &cfg(0.1, 500), &plan, &mut |_, _| Ok(())).unwrap();
        let test = src.draw(1000);
        let logits = net.infer(&test.x, &BatchCtx::single(1000)).unwrap();
        assert!(error_rate(&logits, &test.labels) < 0.05);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_converges_ema() {
        let mut net = blob_net(3);
        let before = net.params();
        let x = Blobs { rng: ChaCha8Rng::seed_from_u64(4), n: 32 }.draw(32);
        struct Fixed(TrainBatch);
        impl BatchSource for Fixed {
            fn next_batch(&mut self, _: usize) -> Result<TrainBatch> {
                Ok(self.0.clone())
            }
        }
        let plan = NormBatchPlan::new(Strategy::PerWorker);
        train(&mut net, &mut Fixed(x.clone()), &cfg(0.0, 200), &plan, &mut |_, _| Ok(())).unwrap();
        assert_eq!(net.params(), before);
        let target = crate::tensor::channel_moments(&net.forward_to_bn(&x.x, &BatchCtx::single(32), 0).unwrap()).unwrap();
        let ema = net.bn_layers().next().unwrap().ema.as_stats();
        assert!(ema.max_abs_diff(&target) < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = blob_net(5);
            let mut src = Blobs { rng: ChaCha8Rng::seed_from_u64(6), n: 8 };
            let plan = NormBatchPlan::new(Strategy::Shuffle { seed: 9 });
            let mut src2 = WorkerSplit(&mut src);
            train(&mut net, &mut src2, &cfg(0.05, 50), &plan, &mut |_, _| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
    }

    struct WorkerSplit<'a>(&'a mut Blobs);
    impl BatchSource for WorkerSplit<'_> {
        fn next_batch(&mut self, step: usize) -> Result<TrainBatch> {
            let mut b = self.0.next_batch(step)?;
            b.worker_sizes = vec![2, 2, 4];
            Ok(b)
        }
    }

    #[test]
    fn virtual_step_masks_reference_samples() {
        let mut src = Blobs { rng: ChaCha8Rng::seed_from_u64(7), n: 6 };
        let mut batch = src.draw(6);
        batch.worker_sizes = vec![3, 3];
        let plan = NormBatchPlan::new(Strategy::Virtual { extra: 2 });
        assert!(step_inputs(&batch, &plan, 0).is_err());
        batch.reference = Some(src.draw(4).x);
        let (x, labels, ctx) = step_inputs(&batch, &plan, 0).unwrap();
        assert_eq!(x.n(), 10);
        assert_eq!(labels.len(), 10);
        assert_eq!(ctx.cohorts.sizes(), vec![5, 5]);
        assert_eq!(ctx.reference.as_ref().unwrap().iter().filter(|&&r| r).count(), 4);
        let mut net = blob_net(8);
        let (_, grads) = net.loss_and_grad(&x, &labels, &ctx).unwrap();
        for i in 6..10 {
            assert!(grads.input.sample(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn warmup_is_linear() {
        let c = cfg(1.0, 0);
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(4), 0.5);
        assert_eq!(c.lr_at(50), 1.0);
        assert!(SgdConfig { lr: -1.0, ..c.clone() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..c }.validate().is_err());
    }
}
