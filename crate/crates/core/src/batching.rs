//! Carving a logical SGD batch into normalization cohorts.
//!
//! Simulated workers each hold a slice of the global batch. A
//! [`NormBatchPlan`] decides which samples share statistics: each worker on
//! its own, ghost sub-batches, one synchronized cohort, a per-step random
//! shuffle across workers, or workers padded with virtual reference samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};
use crate::norm::{AffineBank, BatchCtx, Cohorts};
use crate::tensor::{self, channel_moments, concat_batch, ChannelStats, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PerWorker,
    Ghost { sub_batch: usize },
    Sync,
    /// Each worker's cohort is padded with `extra` reference samples.
    Virtual { extra: usize },
    Shuffle { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    #[default]
    Shared,
    PerDomain,
}

/// Whether SGD-time statistics, population statistics and affine parameters
/// are shared across input domains or kept per domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPolicy {
    pub sgd_stats: StatsScope,
    pub pop_stats: StatsScope,
    pub affine: StatsScope,
}

impl DomainPolicy {
    pub const fn new(sgd_stats: StatsScope, pop_stats: StatsScope, affine: StatsScope) -> Self {
        DomainPolicy { sgd_stats, pop_stats, affine }
    }

    /// Population statistics computed the same way features were normalized in SGD.
    pub fn is_consistent(&self) -> bool {
        self.sgd_stats == self.pop_stats
    }

    pub fn label(&self) -> String {
        let s = |x: StatsScope| match x {
            StatsScope::Shared => "shared",
            StatsScope::PerDomain => "domain",
        };
        format!("sgd={}/pop={}/affine={}", s(self.sgd_stats), s(self.pop_stats), s(self.affine))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormBatchPlan {
    pub strategy: Strategy,
    #[serde(default)]
    pub domain_policy: DomainPolicy,
}

impl NormBatchPlan {
    pub const fn new(strategy: Strategy) -> Self {
        NormBatchPlan { strategy, domain_policy: DomainPolicy::new(StatsScope::Shared, StatsScope::Shared, StatsScope::Shared) }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Ghost { sub_batch: 0 } => Err(BnError::InvalidPlan("ghost sub-batch size must be positive".into())),
            Strategy::Virtual { extra: 0 } => Err(BnError::InvalidPlan("virtual batch needs at least one extra sample".into())),
            _ => Ok(()),
        }
    }
}

/// Per-worker batches of one SGD step.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerLayout {
    worker_batches: Vec<Tensor4>,
    reference: Option<Tensor4>,
}

impl WorkerLayout {
    pub fn new(worker_batches: Vec<Tensor4>) -> Result<Self> {
        let first = worker_batches
            .first()
            .ok_or_else(|| BnError::InvalidPlan("layout needs at least one worker".into()))?
            .shape();
        if let Some(w) = worker_batches
            .iter()
            .find(|w| (w.c(), w.shape().h, w.shape().w) != (first.c, first.h, first.w))
        {
            return Err(BnError::ShapeMismatch(format!("worker batch {} does not match {first}", w.shape())));
        }
        Ok(WorkerLayout { worker_batches, reference: None })
    }

    /// Reference pool for [`Strategy::Virtual`]; every worker uses its first `extra` samples.
    pub fn with_reference(mut self, reference: Tensor4) -> Result<Self> {
        let s = self.worker_batches[0].shape();
        if (reference.c(), reference.shape().h, reference.shape().w) != (s.c, s.h, s.w) {
            return Err(BnError::ShapeMismatch("reference pool does not match worker batches".into()));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn workers(&self) -> &[Tensor4] {
        &self.worker_batches
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.worker_batches.iter().map(Tensor4::n).collect()
    }

    pub fn total(&self) -> usize {
        self.worker_batches.iter().map(Tensor4::n).sum()
    }
}

/// Cohorts over a global batch: the workers' samples in order, followed by
/// `reference_per_worker * workers` reference samples when the plan is virtual.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortPlan {
    pub cohorts: Cohorts,
    /// Number of leading (non-reference) samples.
    pub main: usize,
    pub reference_per_worker: usize,
}

impl CohortPlan {
    pub fn total(&self) -> usize {
        self.cohorts.n()
    }

    pub fn reference_mask(&self) -> Option<Vec<bool>> {
        (self.reference_per_worker > 0).then(|| (0..self.total()).map(|i| i >= self.main).collect())
    }

    pub fn ctx(&self) -> BatchCtx {
        let ctx = BatchCtx::with_cohorts(self.cohorts.clone());
        match self.reference_mask() {
            Some(mask) => ctx.reference(mask),
            None => ctx,
        }
    }
}

/// Builds cohorts for workers of the given sizes. `step` feeds the per-step
/// shuffle permutation.
pub fn plan_cohorts(worker_sizes: &[usize], strategy: Strategy, step: u64) -> Result<CohortPlan> {
    NormBatchPlan::new(strategy).validate()?;
    if worker_sizes.is_empty() {
        return Err(BnError::InvalidPlan("layout needs at least one worker".into()));
    }
    let main: usize = worker_sizes.iter().sum();
    if main == 0 {
        return Err(BnError::EmptyBatch);
    }
    let ranges: Vec<(usize, usize)> = worker_sizes
        .iter()
        .scan(0, |start, &k| {
            let r = (*start, *start + k);
            *start += k;
            Some(r)
        })
        .collect();
    let nonempty = |g: &Vec<usize>| !g.is_empty();
    let (groups, reference_per_worker) = match strategy {
        Strategy::PerWorker => (ranges.iter().map(|&(a, b)| (a..b).collect()).filter(nonempty).collect(), 0),
        Strategy::Sync => (vec![(0..main).collect()], 0),
        Strategy::Ghost { sub_batch } => {
            let mut groups = Vec::new();
            for &(a, b) in &ranges {
                let mut s = a;
                while s < b {
                    let e = (s + sub_batch).min(b);
                    groups.push((s..e).collect());
                    s = e;
                }
            }
            (groups, 0)
        }
        Strategy::Shuffle { seed } => {
            let mut perm: Vec<usize> = (0..main).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            (ranges.iter().map(|&(a, b)| perm[a..b].to_vec()).filter(nonempty).collect(), 0)
        }
        Strategy::Virtual { extra } => {
            let groups = ranges
                .iter()
                .enumerate()
                .map(|(w, &(a, b))| {
                    let r0 = main + w * extra;
                    (a..b).chain(r0..r0 + extra).collect()
                })
                .collect();
            (groups, extra)
        }
    };
    let total = main + reference_per_worker * worker_sizes.len();
    Ok(CohortPlan { cohorts: Cohorts::from_groups(groups, total)?, main, reference_per_worker })
}

/// Splits every cohort by domain id, for per-domain SGD statistics.
pub fn split_cohorts_by_domain(cohorts: &Cohorts, domains: &[usize]) -> Result<Cohorts> {
    if domains.len() != cohorts.n() {
        return Err(BnError::SizeMismatch("one domain id per sample required".into()));
    }
    let mut groups = Vec::new();
    for g in cohorts.groups() {
        let mut ids: Vec<usize> = g.iter().map(|&i| domains[i]).collect();
        ids.sort_unstable();
        ids.dedup();
        for d in ids {
            groups.push(g.iter().copied().filter(|&i| domains[i] == d).collect());
        }
    }
    Cohorts::from_groups(groups, cohorts.n())
}

/// Where each row of a normalization batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Global sample index (workers concatenated in order).
    Sample(usize),
    /// A virtual reference sample; its output is discarded.
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormBatch {
    pub batch: Tensor4,
    pub routing: Vec<Route>,
}

/// Materializes the normalization batches of a plan.
pub fn plan_normalization_batches(layout: &WorkerLayout, plan: &NormBatchPlan, step: u64) -> Result<Vec<NormBatch>> {
    let cp = plan_cohorts(&layout.sizes(), plan.strategy, step)?;
    let global = global_batch(layout, &cp)?;
    Ok(cp
        .cohorts
        .groups()
        .iter()
        .map(|g| NormBatch {
            batch: global.select(g),
            routing: g
                .iter()
                .map(|&i| if i < cp.main { Route::Sample(i) } else { Route::Reference })
                .collect(),
        })
        .collect())
}

/// The workers' samples concatenated, followed by each worker's reference copies.
pub fn global_batch(layout: &WorkerLayout, cp: &CohortPlan) -> Result<Tensor4> {
    let mut parts: Vec<Tensor4> = layout.workers().to_vec();
    if cp.reference_per_worker > 0 {
        let pool = layout
            .reference
            .as_ref()
            .ok_or_else(|| BnError::InvalidPlan("virtual plan needs a reference pool".into()))?;
        if pool.n() < cp.reference_per_worker {
            return Err(BnError::InvalidPlan(format!(
                "reference pool holds {} samples, plan needs {}",
                pool.n(),
                cp.reference_per_worker
            )));
        }
        let idx: Vec<usize> = (0..cp.reference_per_worker).collect();
        let extra = pool.select(&idx);
        for _ in 0..layout.workers().len() {
            parts.push(extra.clone());
        }
    }
    concat_batch(&parts)
}

/// Normalizes every cohort with its own moments and routes outputs back to
/// global sample order. Reference outputs are dropped.
pub fn normalize_with_plan(layout: &WorkerLayout, plan: &NormBatchPlan, step: u64, eps: f64) -> Result<Tensor4> {
    let batches = plan_normalization_batches(layout, plan, step)?;
    let shape = layout.workers()[0].shape().with_n(layout.total());
    let mut out = Tensor4::zeros(shape);
    for nb in batches {
        let y = tensor::normalize(&nb.batch, &channel_moments(&nb.batch)?, eps)?;
        for (k, r) in nb.routing.iter().enumerate() {
            if let Route::Sample(i) = *r {
                out.sample_mut(i).copy_from_slice(y.sample(k));
            }
        }
    }
    Ok(out)
}

/// Pools per-worker moments through `E[x]` and `E[x^2]`, weighting each
/// worker by its element count; `Var = E[x^2] - E[x]^2`.
pub fn sync_moments(per_worker: &[ChannelStats]) -> Result<ChannelStats> {
    let first = per_worker.first().ok_or(BnError::EmptyLog)?;
    let channels = first.channels();
    if per_worker.iter().any(|s| s.channels() != channels) {
        return Err(BnError::ShapeMismatch("workers disagree on channel count".into()));
    }
    let total: usize = per_worker.iter().map(|s| s.count).sum();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        // the all-reduce payload: sum x and sum x^2 per channel
        let (mut sx, mut sxx) = (0.0, 0.0);
        for s in per_worker {
            let n = s.count as f64;
            sx += n * s.mean[c];
            sxx += n * (s.var[c] + s.mean[c] * s.mean[c]);
        }
        let ex = sx / total as f64;
        mean[c] = ex;
        var[c] = (sxx / total as f64 - ex * ex).max(0.0);
    }
    Ok(ChannelStats { mean, var, count: total })
}

/// Inference or training phase for [`apply_domain_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics, shared or per domain according to `sgd_stats`.
    Train,
    /// Stored population statistics according to `pop_stats`.
    Eval,
}

/// Population statistics available to [`apply_domain_policy`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainPopulation {
    pub shared: Option<ChannelStats>,
    pub per_domain: Option<Vec<ChannelStats>>,
}

/// One normalization layer applied to features from several domains.
///
/// `domain_ids[k]` names the domain of `features[k]`; per-domain population
/// statistics and affine parameters are looked up by it and fail with
/// `MissingDomainId` when it is absent.
pub fn apply_domain_policy(
    features: &[Tensor4],
    domain_ids: Option<&[usize]>,
    policy: &DomainPolicy,
    phase: Phase,
    population: &DomainPopulation,
    affine: &AffineBank,
    eps: f64,
) -> Result<Vec<Tensor4>> {
    if features.is_empty() {
        return Err(BnError::EmptyBatch);
    }
    if domain_ids.is_some_and(|d| d.len() != features.len()) {
        return Err(BnError::SizeMismatch("one domain id per feature tensor required".into()));
    }
    let domain_of = |k: usize| -> Result<usize> { domain_ids.map(|d| d[k]).ok_or(BnError::MissingDomainId) };
    let normalized: Vec<Tensor4> = match phase {
        Phase::Train => match policy.sgd_stats {
            StatsScope::Shared => {
                let stats = joint_moments(features)?;
                features.iter().map(|f| tensor::normalize(f, &stats, eps)).collect::<Result<_>>()?
            }
            StatsScope::PerDomain => features
                .iter()
                .map(|f| tensor::normalize(f, &channel_moments(f)?, eps))
                .collect::<Result<_>>()?,
        },
        Phase::Eval => match policy.pop_stats {
            StatsScope::Shared => {
                let stats = population
                    .shared
                    .as_ref()
                    .ok_or_else(|| BnError::MissingStats("shared population".into()))?;
                features.iter().map(|f| tensor::normalize(f, stats, eps)).collect::<Result<_>>()?
            }
            StatsScope::PerDomain => {
                let all = population
                    .per_domain
                    .as_ref()
                    .ok_or_else(|| BnError::MissingStats("per-domain population".into()))?;
                features
                    .iter()
                    .enumerate()
                    .map(|(k, f)| {
                        let d = domain_of(k)?;
                        let s = all
                            .get(d)
                            .ok_or_else(|| BnError::InvalidPolicy(format!("domain {d} has no population statistics")))?;
                        tensor::normalize(f, s, eps)
                    })
                    .collect::<Result<_>>()?
            }
        },
    };
    match policy.affine {
        StatsScope::Shared => {
            if affine.is_per_domain() {
                return Err(BnError::InvalidPolicy("shared affine policy with a per-domain affine bank".into()));
            }
            normalized.iter().map(|y| affine.slots()[0].forward(y)).collect()
        }
        StatsScope::PerDomain => normalized
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let d = domain_of(k)?;
                let a = affine
                    .slots()
                    .get(d)
                    .ok_or_else(|| BnError::InvalidPolicy(format!("domain {d} has no affine slot")))?;
                a.forward(y)
            })
            .collect(),
    }
}

/// Moments of every element of every part, via the spatial flatten when
/// parts share a batch size and batch concatenation otherwise.
fn joint_moments(parts: &[Tensor4]) -> Result<ChannelStats> {
    let n0 = parts[0].n();
    if parts.iter().all(|p| p.n() == n0) {
        let (flat, _) = tensor::flatten_spatial_concat(parts)?;
        channel_moments(&flat)
    } else {
        channel_moments(&concat_batch(parts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn layout(sizes: &[usize], c: usize, seed: u64) -> WorkerLayout {
        let mut r = rng(seed);
        WorkerLayout::new(sizes.iter().map(|&n| Tensor4::randn(Shape4::new(n, c, 2, 1), &mut r)).collect()).unwrap()
    }

    #[test]
    fn degenerate_strategies_agree_for_one_worker() {
        let l = layout(&[6], 3, 1);
        let per = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::PerWorker), 0, 1e-5).unwrap();
        let sync = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::Sync), 0, 1e-5).unwrap();
        let ghost = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::Ghost { sub_batch: 6 }), 0, 1e-5).unwrap();
        assert_eq!(per, sync);
        assert_eq!(per, ghost);
    }

    #[test]
    fn ghost_counts() {
        let l = layout(&[4, 4], 2, 2);
        let b = plan_normalization_batches(&l, &NormBatchPlan::new(Strategy::Ghost { sub_batch: 2 }), 0).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|nb| nb.batch.n() == 2));
        let cp = plan_cohorts(&[5], Strategy::Ghost { sub_batch: 2 }, 0).unwrap();
        assert_eq!(cp.cohorts.sizes(), vec![2, 2, 1]);
        assert!(matches!(
            plan_cohorts(&[4], Strategy::Ghost { sub_batch: 0 }, 0),
            Err(BnError::InvalidPlan(_))
        ));
    }

    #[test]
    fn shuffle_is_a_per_step_bijection() {
        let sizes = [3, 5, 4];
        let a = plan_cohorts(&sizes, Strategy::Shuffle { seed: 7 }, 0).unwrap();
        assert_eq!(a.cohorts.sizes(), sizes.to_vec());
        let mut all: Vec<usize> = a.cohorts.groups().concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        let b = plan_cohorts(&sizes, Strategy::Shuffle { seed: 7 }, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, plan_cohorts(&sizes, Strategy::Shuffle { seed: 7 }, 0).unwrap());
    }

    #[test]
    fn identity_shuffle_matches_per_worker() {
        let sizes = [1, 1];
        let seed = (0..64)
            .find(|&s| {
                let cp = plan_cohorts(&sizes, Strategy::Shuffle { seed: s }, 0).unwrap();
                cp.cohorts.groups() == [vec![0], vec![1]]
            })
            .expect("some seed leaves two elements in place");
        let l = layout(&sizes, 2, 3);
        let a = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::Shuffle { seed }), 0, 1e-5).unwrap();
        let b = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::PerWorker), 0, 1e-5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_routes_outputs_to_their_samples() {
        let l = layout(&[4, 4], 2, 4);
        let plan = NormBatchPlan::new(Strategy::Shuffle { seed: 3 });
        let batches = plan_normalization_batches(&l, &plan, 5).unwrap();
        let out = normalize_with_plan(&l, &plan, 5, 1e-5).unwrap();
        let global = concat_batch(l.workers()).unwrap();
        for nb in &batches {
            let stats = channel_moments(&nb.batch).unwrap();
            for (k, r) in nb.routing.iter().enumerate() {
                let Route::Sample(i) = *r else { unreachable!() };
                assert_eq!(nb.batch.sample(k), global.sample(i));
                let y = tensor::normalize(&global.select(&[i]), &stats, 1e-5).unwrap();
                assert_eq!(y.sample(0), out.sample(i));
            }
        }
    }

    #[test]
    fn sync_equals_concatenated_normalization() {
        let l = layout(&[3, 1, 6], 4, 5);
        let sync = normalize_with_plan(&l, &NormBatchPlan::new(Strategy::Sync), 0, 1e-5).unwrap();
        let per: Vec<ChannelStats> = l.workers().iter().map(|w| channel_moments(w).unwrap()).collect();
        let pooled = sync_moments(&per).unwrap();
        let global = concat_batch(l.workers()).unwrap();
        let via_moments = tensor::normalize(&global, &pooled, 1e-5).unwrap();
        assert!(sync.max_abs_diff(&via_moments) < 1e-12);
    }

    #[test]
    fn sync_moment_examples() {
        let a = ChannelStats::new(vec![0.0], vec![0.0], 2).unwrap();
        let b = ChannelStats::new(vec![3.0], vec![0.0], 1).unwrap();
        let s = sync_moments(&[a.clone(), b]).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 1e-15 && (s.var[0] - 2.0).abs() < 1e-15);
        assert_eq!(sync_moments(std::slice::from_ref(&a)).unwrap(), a);
        let c = ChannelStats::new(vec![1.5, -2.0], vec![0.5, 3.0], 4).unwrap();
        let s = sync_moments(&[c.clone(), c.clone()]).unwrap();
        assert!(s.max_abs_diff(&c) < 1e-14);
        assert_eq!(sync_moments(&[]), Err(BnError::EmptyLog));
    }

    #[test]
    fn virtual_plan_appends_reference_copies() {
        let mut r = rng(6);
        let l = layout(&[2, 3], 2, 6)
            .with_reference(Tensor4::randn(Shape4::new(4, 2, 2, 1), &mut r))
            .unwrap();
        let plan = NormBatchPlan::new(Strategy::Virtual { extra: 2 });
        let batches = plan_normalization_batches(&l, &plan, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].batch.n(), 4);
        assert_eq!(batches[1].routing.iter().filter(|r| **r == Route::Reference).count(), 2);
        let without = WorkerLayout::new(l.workers().to_vec()).unwrap();
        assert!(plan_normalization_batches(&without, &plan, 0).is_err());
    }

    #[test]
    fn virtual_outputs_depend_on_reference_samples() {
        let mut r = rng(7);
        let base = layout(&[3], 2, 7);
        let ref_a = Tensor4::randn(Shape4::new(2, 2, 2, 1), &mut r);
        let ref_b = ref_a.map(|v| v + 1.0);
        let plan = NormBatchPlan::new(Strategy::Virtual { extra: 2 });
        let a = normalize_with_plan(&base.clone().with_reference(ref_a).unwrap(), &plan, 0, 1e-5).unwrap();
        let b = normalize_with_plan(&base.with_reference(ref_b).unwrap(), &plan, 0, 1e-5).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    #[test]
    fn domain_split_refines_cohorts() {
        let c = Cohorts::contiguous(&[4, 2]);
        let s = split_cohorts_by_domain(&c, &[0, 1, 0, 1, 1, 1]).unwrap();
        assert_eq!(s.groups(), &[vec![0, 2], vec![1, 3], vec![4, 5]]);
        assert!(split_cohorts_by_domain(&c, &[0]).is_err());
    }

    #[test]
    fn gradient_accumulation_keeps_cohorts() {
        // one step over 8 samples per worker vs two accumulated half steps
        let full = plan_cohorts(&[8, 8], Strategy::Ghost { sub_batch: 4 }, 0).unwrap();
        let half = plan_cohorts(&[4, 4], Strategy::PerWorker, 0).unwrap();
        assert!(full.cohorts.sizes().iter().all(|&s| s == 4));
        assert_eq!(half.cohorts.sizes(), vec![4, 4]);
        // accumulation changes the SGD batch, never the cohort size
        let accumulated = plan_cohorts(&[4, 4], Strategy::PerWorker, 1).unwrap();
        assert_eq!(accumulated.cohorts.sizes(), half.cohorts.sizes());
    }

    fn domain_features(means: &[f64], n: usize, seed: u64) -> Vec<Tensor4> {
        let mut r = rng(seed);
        means
            .iter()
            .map(|m| Tensor4::randn(Shape4::flat(n, 1), &mut r).map(|v| v + m))
            .collect()
    }

    #[test]
    fn domain_policy_single_domain_coincides() {
        let f = domain_features(&[2.0], 50, 8);
        let stats = channel_moments(&f[0]).unwrap();
        let pop = DomainPopulation { shared: Some(stats.clone()), per_domain: Some(vec![stats]) };
        let aff = AffineBank::shared(1);
        let mut outs = vec![];
        for sgd in [StatsScope::Shared, StatsScope::PerDomain] {
            for p in [StatsScope::Shared, StatsScope::PerDomain] {
                let pol = DomainPolicy::new(sgd, p, StatsScope::Shared);
                outs.push(apply_domain_policy(&f, Some(&[0]), &pol, Phase::Train, &pop, &aff, 1e-5).unwrap());
                outs.push(apply_domain_policy(&f, Some(&[0]), &pol, Phase::Eval, &pop, &aff, 1e-5).unwrap());
            }
        }
        for o in &outs {
            assert!(o[0].max_abs_diff(&outs[0][0]) < 1e-12);
        }
    }

    #[test]
    fn domain_policy_shared_vs_per_domain() {
        let f = domain_features(&[0.0, 10.0], 2000, 9);
        let aff = AffineBank::shared(1);
        let pop = DomainPopulation::default();
        let shared = DomainPolicy::new(StatsScope::Shared, StatsScope::Shared, StatsScope::Shared);
        let split = DomainPolicy::new(StatsScope::PerDomain, StatsScope::PerDomain, StatsScope::Shared);
        let ys = apply_domain_policy(&f, None, &shared, Phase::Train, &pop, &aff, 1e-5).unwrap();
        let yd = apply_domain_policy(&f, None, &split, Phase::Train, &pop, &aff, 1e-5).unwrap();
        // joint sd is about sqrt(1 + 25), so the domain means sit near -/+ 5 / 5.1
        let expect = 5.0 / 26f64.sqrt();
        let m0 = channel_moments(&ys[0]).unwrap().mean[0];
        let m1 = channel_moments(&ys[1]).unwrap().mean[0];
        assert!((m0 + expect).abs() < 0.05, "{m0}");
        assert!((m1 - expect).abs() < 0.05, "{m1}");
        for y in &yd {
            assert!(channel_moments(y).unwrap().mean[0].abs() < 1e-9);
        }
    }

    #[test]
    fn domain_policy_equal_moments_give_equal_outputs() {
        let a = domain_features(&[1.0], 16, 10).remove(0);
        // same values permuted: identical moments
        let idx: Vec<usize> = (0..16).rev().collect();
        let b = a.select(&idx);
        let aff = AffineBank::shared(1);
        let pop = DomainPopulation::default();
        let shared = DomainPolicy::new(StatsScope::Shared, StatsScope::Shared, StatsScope::Shared);
        let split = DomainPolicy::new(StatsScope::PerDomain, StatsScope::Shared, StatsScope::Shared);
        let f = vec![a, b];
        let ys = apply_domain_policy(&f, None, &shared, Phase::Train, &pop, &aff, 1e-5).unwrap();
        let yd = apply_domain_policy(&f, None, &split, Phase::Train, &pop, &aff, 1e-5).unwrap();
        for (s, d) in ys.iter().zip(&yd) {
            assert!(s.max_abs_diff(d) < 1e-12);
        }
    }

    #[test]
    fn domain_policy_errors() {
        let f = domain_features(&[0.0, 1.0], 4, 11);
        let per_pop = DomainPolicy::new(StatsScope::PerDomain, StatsScope::PerDomain, StatsScope::Shared);
        let pop = DomainPopulation { shared: None, per_domain: Some(vec![ChannelStats::standard(1); 2]) };
        let aff = AffineBank::shared(1);
        assert_eq!(
            apply_domain_policy(&f, None, &per_pop, Phase::Eval, &pop, &aff, 1e-5).unwrap_err(),
            BnError::MissingDomainId
        );
        assert!(apply_domain_policy(&f, Some(&[0, 1]), &per_pop, Phase::Eval, &pop, &aff, 1e-5).is_ok());
        let shared_pop = DomainPolicy::new(StatsScope::Shared, StatsScope::Shared, StatsScope::Shared);
        assert!(matches!(
            apply_domain_policy(&f, None, &shared_pop, Phase::Eval, &pop, &aff, 1e-5),
            Err(BnError::MissingStats(_))
        ));
        let per_aff = DomainPolicy::new(StatsScope::Shared, StatsScope::Shared, StatsScope::Shared);
        assert!(matches!(
            apply_domain_policy(&f, None, &per_aff, Phase::Train, &pop, &AffineBank::per_domain(1, 2), 1e-5),
            Err(BnError::InvalidPolicy(_))
        ));
    }
}
